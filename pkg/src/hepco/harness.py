"""Experiment configuration, the task/round loop, ablation suite, and output files.

This is the only module that writes files or talks to the console.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baselines
from .client import train_local
from .encoder import Dataset, SyntheticSpec, load_embeddings, synth_generate
from .generator import LatentGenerator, build_distribution, train_generator, train_previous_task_generator
from .metrics import AccuracyMatrix, average_accuracy, communication_ratio, evaluate, forgetting
from .promptmodel import FrozenAttention, PromptState
from .seeding import seed_streams, substream  # noqa: F401  (seed_streams re-exported)
from .server import ServerState, average_arrays, average_weights, distill, end_of_task
from .taskstream import HeterogeneityConfig, assign_round, build_task_sequence

log = logging.getLogger(__name__)

METHODS = ("hepco", "fedavg-prompt", "fedprox-prompt", "fedavg-ft", "centralized-prompt")
ABLATIONS = ("no_prev_server", "no_kl", "no_mse", "no_prompt_distill", "no_classifier_distill")
OUT_ENV = "HEPCO_OUT_DIR"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    # [data]
    source: str = "synthetic"
    path: str = ""
    n_classes: int = 20
    samples_per_class: int = 100
    test_per_class: int = 50
    dim: int = 32
    n_tokens: int = 4
    center_scale: float = 1.0
    noise_scale: float = 1.0
    data_seed: int = 0
    test_fraction: float = 0.2
    # [federation]
    n_tasks: int = 5
    rounds: int = 5
    clients: int = 5
    gamma: float = 0.1
    kappa: float = 0.6
    beta: float = 1.0
    weighted_average: bool = False
    # [model]
    pool_size: int = 10
    prompt_length: int = 4
    prompt_scale: float = 1.0
    identity_value: bool = True
    # [client]
    method: str = "hepco"
    client_epochs: int = 10
    client_lr: float = 1e-3
    ft_lr: float = 5e-5
    batch_size: int = 64
    fedprox_mu: float = 0.01
    ce_mask: str = "seen"
    # [generator]
    gen_epochs: int = 100
    gen_lr: float = 1e-4
    gen_batch: int = 64
    gen_steps_per_epoch: int = 1
    lambda_kl: float = 1.0
    lambda_mse: float = 0.1
    # [distill]
    distill_epochs: int = 200
    distill_lr: float = 1e-4
    distill_batch: int = 64
    distill_steps_per_epoch: int = 1
    replay_ratio: float = 0.5
    # [ablation]
    no_prev_server: bool = False
    no_kl: bool = False
    no_mse: bool = False
    no_prompt_distill: bool = False
    no_classifier_distill: bool = False
    # [run]
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = 0  # 0 -> one per client

    def validate(self) -> "ExperimentConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(self.source in ("synthetic", "file"), "source", "must be 'synthetic' or 'file'")
        need(self.source != "file" or self.path, "path", "required when source = file")
        need(self.method in METHODS, "method", f"must be one of {', '.join(METHODS)}")
        for name in ("gamma", "kappa", "beta"):
            v = getattr(self, name)
            need(0.0 < v <= 1.0, name, f"must lie in (0, 1], got {v}")
        need(0.0 <= self.replay_ratio <= 1.0, "replay_ratio", "must lie in [0, 1]")
        need(0.0 < self.test_fraction < 1.0, "test_fraction", "must lie in (0, 1)")
        for name in ("n_tasks", "rounds", "clients", "n_classes", "samples_per_class", "dim", "n_tokens",
                     "pool_size", "prompt_length", "client_epochs", "batch_size", "gen_epochs", "gen_batch",
                     "gen_steps_per_epoch", "distill_epochs", "distill_batch", "distill_steps_per_epoch"):
            need(getattr(self, name) >= 1, name, "must be >= 1")
        need(self.prompt_length % 2 == 0, "prompt_length", "must be even")
        need(self.dim >= 2, "dim", "must be >= 2")
        need(self.workers >= 0, "workers", "must be >= 0")
        need(self.ce_mask in ("seen", "current"), "ce_mask", "must be 'seen' or 'current'")
        for name in ("lambda_kl", "lambda_mse", "fedprox_mu", "client_lr", "ft_lr", "gen_lr", "distill_lr"):
            need(getattr(self, name) >= 0, name, "must be >= 0")
        for name in ABLATIONS:
            need(not getattr(self, name) or self.method == "hepco", name, "ablations apply to method = hepco only")
        if self.source == "synthetic":
            need(self.n_classes % self.n_tasks == 0, "n_tasks", f"{self.n_classes} classes do not split evenly")
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def hash(self) -> str:
        """Digest of everything that influences results (output dir and thread count excluded)."""
        d = dataclasses.asdict(self)
        for k in ("out_dir", "workers"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def lambdas(self) -> tuple[float, float]:
        return (0.0 if self.no_kl else self.lambda_kl, 0.0 if self.no_mse else self.lambda_mse)

    @property
    def distillation_on(self) -> bool:
        return self.method == "hepco" and not (self.no_prompt_distill and self.no_classifier_distill)


def _convert(raw: str, typ, name: str):
    try:
        if typ is bool or typ == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse INI-style text; section names are for grouping only, keys must be known fields."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError("<file>", str(e)) from None
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(key, f"unknown key in [{section}]")
            values[key] = _convert(raw, types[key], key)
    return ExperimentConfig(**values).validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError("config", str(e)) from None
    return parse_config(text)


def synthetic_spec(cfg: ExperimentConfig) -> SyntheticSpec:
    return SyntheticSpec(cfg.n_classes, cfg.samples_per_class, cfg.dim, cfg.n_tokens, cfg.center_scale,
                         cfg.noise_scale, cfg.data_seed, cfg.test_per_class)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.source == "synthetic":
        return synth_generate(synthetic_spec(cfg))
    ds = load_embeddings(cfg.path)
    if ds.n_classes % cfg.n_tasks:
        raise ConfigError("n_tasks", f"{ds.n_classes} classes do not split evenly")
    return ds.split(cfg.test_fraction, cfg.data_seed)


@dataclass
class RunResult:
    config: ExperimentConfig
    matrix: AccuracyMatrix
    final_state: PromptState
    task_states: list[PromptState]
    rows: list[dict] = field(default_factory=list)
    comm_ratio_pct: float = 0.0

    @property
    def A_N(self) -> float:
        return average_accuracy(self.matrix)

    @property
    def F_N(self) -> float:
        return forgetting(self.matrix)

    def summary(self) -> dict:
        return {
            "A_N": round(self.A_N, 12),
            "F_N": round(self.F_N, 12),
            "comm_ratio_pct": round(self.comm_ratio_pct, 12),
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "method": self.config.method,
            "accuracy_matrix": self.matrix.to_list(),
        }


def _test_sets(ds: Dataset, stream, t: int):
    return [(ds.tokens[k.test_idx], ds.queries[k.test_idx], ds.labels[k.test_idx]) for k in stream.tasks[: t + 1]]


def run_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None) -> RunResult:
    """Run the full task/round protocol for ``cfg.method``; deterministic in (cfg, cfg.seed)."""
    cfg.validate()
    ds = dataset if dataset is not None else load_dataset(cfg)
    n_classes, dim = ds.n_classes, ds.dim
    sample_labels = np.asarray(ds.labels)
    stream = build_task_sequence(range(n_classes), cfg.n_tasks, cfg.seed, sample_labels, np.asarray(ds.train_mask))
    attn = FrozenAttention.init(dim, substream(cfg.seed, "attention"), identity_value=cfg.identity_value)
    state = PromptState.init(cfg.pool_size, cfg.prompt_length, dim, n_classes, substream(cfg.seed, "init"),
                             prompt_scale=cfg.prompt_scale)
    reference = attn.n_params + dim * n_classes + n_classes

    if cfg.method == "centralized-prompt":
        matrix, final, states = baselines.centralized_prompt_train(
            ds, stream, state, attn, epochs=cfg.client_epochs, lr=cfg.client_lr, batch_size=cfg.batch_size,
            rng_for=lambda t: substream(cfg.seed, "client", t, 0, 0), ce_mask=cfg.ce_mask)
        rows = [_csv_row(t, 0, matrix.values[t, : t + 1]) for t in range(cfg.n_tasks)]
        return RunResult(cfg, matrix, final, states, rows, communication_ratio(final.n_params, reference))

    het = HeterogeneityConfig(cfg.gamma, cfg.kappa, cfg.beta, cfg.clients, cfg.rounds, cfg.seed)
    full_ft = cfg.method == "fedavg-ft"
    mode = {"fedprox-prompt": "fedprox", "fedavg-ft": "full-ft"}.get(cfg.method, "prompt")
    lr = cfg.ft_lr if full_ft else cfg.client_lr
    workers = cfg.workers or cfg.clients
    server = ServerState(current=state)
    matrix = AccuracyMatrix(cfg.n_tasks)
    rows, task_states = [], []

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for t, task in enumerate(stream.tasks):
            active = stream.active_mask(t, n_classes, cfg.ce_mask)
            seen_mask = stream.active_mask(t, n_classes, "seen")
            seen = stream.labels_through(t)
            for r in range(cfg.rounds):
                assignments = assign_round(task, sample_labels, het, r, cfg.seed)
                start_state, start_attn = server.current, attn

                def work(a):
                    idx = a.indices
                    return train_local(start_state, ds.tokens[idx], ds.queries[idx], ds.labels[idx], start_attn,
                                       epochs=cfg.client_epochs, lr=lr, mode=mode, mu=cfg.fedprox_mu,
                                       batch_size=cfg.batch_size, active=active,
                                       rng=substream(cfg.seed, "client", t, r, a.client_id),
                                       client_id=a.client_id)

                reports = list(pool.map(work, assignments))  # ordered by client id
                w_avg = average_weights(reports, [sum(x.counts.values()) for x in reports]
                                        if cfg.weighted_average else None)
                if full_ft:
                    attn = FrozenAttention.from_params(average_arrays([x.attention.params() for x in reports]))
                if cfg.distillation_on:
                    w_avg = _consolidate(cfg, server, reports, w_avg, t, r, n_classes, dim, seen_mask, pool)
                server.current = w_avg
                server.record_round(reports)
                row = evaluate(server.current, attn, _test_sets(ds, stream, t), seen)
                rows.append(_csv_row(t, r, row))
            matrix.set_row(t, row)
            task_states.append(server.current)
            server = end_of_task(server, cfg.rounds)
            log.info("task %d done: accuracies %s", t, np.round(row, 3).tolist())

    payload = (attn.n_params + dim * n_classes + n_classes) if full_ft else server.current.n_params
    return RunResult(cfg, matrix, server.current, task_states, rows, communication_ratio(payload, reference))


def _consolidate(cfg, server: ServerState, reports, w_avg, t, r, n_classes, dim, active, pool):
    """Generator training (current round and, from task 2 on, previous tasks) then distillation.

    Both generators start from a fresh initialisation every round.
    """
    lam_kl, lam_mse = cfg.lambdas
    teachers = [x.state for x in reports]
    dist_cur = build_distribution(reports)
    gen_kw = dict(lam_kl=lam_kl, lam_mse=lam_mse, epochs=cfg.gen_epochs, lr=cfg.gen_lr,
                  batch_size=cfg.gen_batch, steps_per_epoch=cfg.gen_steps_per_epoch, active=active)
    use_prev = t > 0 and not cfg.no_prev_server and cfg.replay_ratio > 0
    dist_prev = server.previous_distribution() if use_prev else None

    def start(kind):
        return LatentGenerator.init(n_classes, dim, substream(cfg.seed, "generator-init", t, r, kind))

    def cur():
        return train_generator(start("cur"), teachers, w_avg, dist_cur,
                               rng=substream(cfg.seed, "generator", t, r, "cur"), **gen_kw)

    def prev():
        return train_previous_task_generator(start("prev"), server.prev, w_avg, dist_prev,
                                             rng=substream(cfg.seed, "generator", t, r, "prev"), **gen_kw)

    fut_cur = pool.submit(cur)
    gen_prev = prev() if use_prev else None
    gen_cur = fut_cur.result()
    return distill(w_avg, teachers, gen_cur, dist_cur, prev_server=server.prev if use_prev else None,
                   gen_prev=gen_prev, dist_prev=dist_prev, replay_ratio=cfg.replay_ratio,
                   epochs=cfg.distill_epochs, lr=cfg.distill_lr, batch_size=cfg.distill_batch,
                   steps_per_epoch=cfg.distill_steps_per_epoch, rng=substream(cfg.seed, "distill", t, r),
                   active=active, prompt_distill=not cfg.no_prompt_distill,
                   classifier_distill=not cfg.no_classifier_distill)


def _csv_row(t: int, r: int, accs) -> dict:
    accs = [float(a) for a in accs]
    return {"task": t, "round": r, "A_so_far": float(np.mean(accs)), "accs": accs}


def ablation_suite(cfg: ExperimentConfig, seeds=None, dataset: Dataset | None = None) -> list[dict]:
    """Full method plus each single ablation, under shared seeds. One row per variant."""
    if cfg.method != "hepco":
        raise ConfigError("method", "ablation suite requires method = hepco")
    base = cfg.replace(**{a: False for a in ABLATIONS})
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    ds = dataset if dataset is not None else load_dataset(base)
    table = []
    for variant in ("full",) + ABLATIONS:
        changes = {} if variant == "full" else {variant: True}
        results = [run_experiment(base.replace(seed=s, **changes), ds) for s in seeds]
        table.append({
            "variant": variant,
            "A_N": float(np.mean([x.A_N for x in results])),
            "F_N": float(np.mean([x.F_N for x in results])),
            "per_seed": [{"seed": s, "A_N": x.A_N, "F_N": x.F_N} for s, x in zip(seeds, results)],
        })
    return table


# ---------------------------------------------------------------------------
# output


def output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    return Path(override or os.environ.get(OUT_ENV) or cfg.out_dir)


def metrics_csv(result: RunResult) -> str:
    n = result.config.n_tasks
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "round", "A_so_far"] + [f"acc_task{j}" for j in range(n)])
    for row in result.rows:
        accs = [f"{a:.6f}" for a in row["accs"]] + [""] * (n - len(row["accs"]))
        w.writerow([row["task"], row["round"], f"{row['A_so_far']:.6f}"] + accs)
    return buf.getvalue()


def summary_json(result: RunResult) -> str:
    return json.dumps(result.summary(), sort_keys=True, indent=2) + "\n"


def write_outputs(result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result))
    (out / "summary.json").write_text(summary_json(result))
    for t, st in enumerate(result.task_states):
        (out / f"server_task{t}.hpst").write_bytes(st.to_bytes())


def ablation_table_text(table) -> str:
    lines = [f"{'variant':<24}{'A_N':>10}{'F_N':>10}"]
    for row in table:
        lines.append(f"{row['variant']:<24}{row['A_N']:>10.4f}{row['F_N']:>10.4f}")
    return "\n".join(lines) + "\n"
