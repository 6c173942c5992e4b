"""Command-line entry point.

    hepco run --config PATH [--seed N] [--out DIR]
    hepco ablate --config PATH [--seeds 0 1 2] [--out DIR]
    hepco gen-synth --spec PATH --out FILE
    hepco inspect --checkpoint PATH

Exit codes: 0 ok, 1 runtime failure, 2 invalid configuration, 3 malformed input file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .encoder import EmbeddingFormatError, synth_generate, write_embeddings
from .harness import (
    ConfigError,
    ablation_suite,
    ablation_table_text,
    load_config,
    output_dir,
    run_experiment,
    summary_json,
    synthetic_spec,
    write_outputs,
)
from .promptmodel import CheckpointFormatError, PromptState

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_FORMAT = 0, 1, 2, 3


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = output_dir(cfg, args.out)
    result = run_experiment(cfg)
    write_outputs(result, out)
    sys.stdout.write(summary_json(result))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    table = ablation_suite(cfg, seeds=args.seeds)
    text = ablation_table_text(table)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text(text)
        (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_gen_synth(args) -> int:
    cfg = load_config(args.spec)
    ds = synth_generate(synthetic_spec(cfg))
    write_embeddings(args.out, ds)
    n, t, d = ds.tokens.shape
    print(f"wrote {n} samples (T={t}, D={d}, classes={ds.n_classes}) to {args.out}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    state = PromptState.from_bytes(Path(args.checkpoint).read_bytes())
    m, length, d, c = state.shape
    info = {
        "pool_size": m,
        "prompt_length": length,
        "dim": d,
        "n_classes": c,
        "params": {"keys": state.keys.size, "prompts": state.prompts.size,
                   "weight": state.weight.size, "bias": state.bias.size},
        "total_params": state.n_params,
    }
    print(json.dumps(info, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hepco", description="Continual federated prompt learning simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory (default: $HEPCO_OUT_DIR or config out_dir)")
    r.set_defaults(func=_cmd_run)

    a = sub.add_parser("ablate", help="run the ablation suite")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--out")
    a.set_defaults(func=_cmd_ablate)

    g = sub.add_parser("gen-synth", help="write a synthetic dataset in the embedding file format")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_synth)

    i = sub.add_parser("inspect", help="print shapes and parameter counts of a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=_cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (EmbeddingFormatError, CheckpointFormatError) as e:
        print(f"format error [{getattr(e, 'code', 'checkpoint')}]: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (OSError, ValueError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
