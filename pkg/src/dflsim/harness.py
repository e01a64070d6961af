"""Config-driven experiment runner and its file formats.

A plain ``key = value`` text document describes the dataset, the
partition, the protocol settings, and the (algorithm arm) x (seed) grid.
Runs land in one directory per (arm, seed) pair:

    <out_dir>/<arm>_seed<seed>/metrics.tsv   per-round records
    <out_dir>/<arm>_seed<seed>/run.cfg       config snapshot for this run
    <out_dir>/<arm>_seed<seed>/divergence.tsv  (when requested)
    <out_dir>/summary.txt                    mean/std final accuracy per arm

All numbers are written with %.17g so reruns are byte-identical and
float64 values survive a round trip through the files.

metrics.tsv columns: round, client, arm, seed, test_acc, train_loss,
dropped (0/1), h_peers, comm_cum (cumulative scalars received).
divergence.tsv columns: round, client, then one divergence per client.
summary.txt columns: arm, n_runs, mean_acc, std_acc (population std over
per-run mean final accuracies).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import datagen, protocol
from .errors import ConfigError

METRICS_HEADER = "# dflsim metrics v1"
SUMMARY_HEADER = "# dflsim summary v1"
DIVERGENCE_HEADER = "# dflsim divergence v1"

_METRIC_COLUMNS = (
    "round",
    "client",
    "arm",
    "seed",
    "test_acc",
    "train_loss",
    "dropped",
    "h_peers",
    "comm_cum",
)


@dataclass(frozen=True)
class ExperimentSpec:
    """Fully validated experiment description with defaults applied.

    Exactly one of ``beta`` (Dirichlet label skew) and ``shards`` (classes
    per client) is set. Defaults mirror the standard large-run settings:
    30 clients, 150 rounds, queue size 5, learning rate 0.05 decaying by
    0.95 with momentum 0.5, batch size 50.
    """

    classes: int = 4
    input_dim: int = 16
    samples_per_class: int = 300
    spread: float = 6.0
    beta: float | None = 0.5
    shards: int | None = None
    min_samples: int = 10
    clients: int = 30
    n_com: int = 5
    th_i: float = 0.1
    mu: float = 0.1
    epochs: int = 2
    rounds: int = 150
    batch_size: int = 50
    learning_rate: float = 0.05
    lr_decay: float = 0.95
    momentum: float = 0.5
    arms: tuple[str, ...] = ("ua_pdfl",)
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"
    record_divergence: bool = False

    def __post_init__(self):
        if self.classes < 1 or self.input_dim < 1 or self.samples_per_class < 1:
            raise ConfigError("classes, input_dim, samples_per_class must be >= 1")
        if self.spread < 0:
            raise ConfigError("spread must be >= 0")
        if (self.beta is None) == (self.shards is None):
            raise ConfigError("set exactly one of beta and shards")
        if self.beta is not None and self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.shards is not None and self.shards < 1:
            raise ConfigError("shards must be >= 1")
        if self.min_samples < 1:
            raise ConfigError("min_samples must be >= 1")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if not self.arms:
            raise ConfigError("arms must be non-empty")
        for arm in self.arms:
            if arm not in protocol.ALGORITHMS:
                raise ConfigError(
                    f"unknown arm {arm!r}; choose from {', '.join(protocol.ALGORITHMS)}"
                )
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if any(a != "local" for a in self.arms):
            if self.clients < 2:
                raise ConfigError("communicating arms need clients >= 2")
            if self.n_com > self.clients - 1:
                raise ConfigError(
                    f"n_com={self.n_com} must be <= clients-1={self.clients - 1}"
                )
        # Remaining numeric constraints are shared with the round engine.
        self.round_config(self.arms[0])

    def round_config(self, arm: str) -> protocol.RoundConfig:
        return protocol.RoundConfig(
            algorithm=arm,
            n_com=self.n_com,
            th_i=self.th_i,
            mu=self.mu,
            epochs=self.epochs,
            rounds=self.rounds,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            momentum=self.momentum,
        )


_INT_KEYS = (
    "classes",
    "input_dim",
    "samples_per_class",
    "shards",
    "min_samples",
    "clients",
    "n_com",
    "epochs",
    "rounds",
    "batch_size",
)
_FLOAT_KEYS = (
    "spread",
    "beta",
    "th_i",
    "mu",
    "learning_rate",
    "lr_decay",
    "momentum",
)


def _convert(key: str, raw: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key == "record_divergence":
            if raw not in ("true", "false"):
                raise ValueError(raw)
            return raw == "true"
        if key == "arms":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if key == "seeds":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key == "out_dir":
            return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    raise ConfigError(f"unknown config key {key!r}")


def parse_config(text: str) -> ExperimentSpec:
    """Parse a key-value document; unknown keys and bad values are rejected.

    Empty documents yield the full default spec. ``beta`` and ``shards``
    are mutually exclusive; setting ``shards`` clears the default beta.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    if "beta" in values and "shards" in values:
        raise ConfigError("beta and shards are mutually exclusive")
    if "shards" in values:
        values["beta"] = None
    return ExperimentSpec(**values)


def render_config(spec: ExperimentSpec) -> str:
    """Inverse of parse_config: parse(render(spec)) == spec."""
    lines = []
    for f in fields(spec):
        value = getattr(spec, f.name)
        if value is None:
            continue
        if f.name in _FLOAT_KEYS:
            text = "%.17g" % value
        elif f.name == "record_divergence":
            text = "true" if value else "false"
        elif f.name in ("arms",):
            text = ",".join(value)
        elif f.name == "seeds":
            text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> ExperimentSpec:
    with open(path) as fh:
        return parse_config(fh.read())


def build_inputs(spec: ExperimentSpec, seed: int):
    """Dataset and partition for one run, seeded from the run seed."""
    ds = datagen.gen_gaussian_mixture(
        spec.classes, spec.input_dim, spec.samples_per_class, spec.spread, seed=seed
    )
    if spec.beta is not None:
        part = datagen.dirichlet_partition(
            ds, spec.clients, spec.beta, seed=seed, min_samples=spec.min_samples
        )
    else:
        part = datagen.shard_partition(
            ds, spec.clients, spec.shards, seed=seed, min_samples=spec.min_samples
        )
    return ds, part


@dataclass
class MatrixResult:
    """Paths produced by one run_matrix invocation."""

    run_dirs: list[str] = field(default_factory=list)
    metrics_paths: list[str] = field(default_factory=list)
    divergence_paths: list[str] = field(default_factory=list)
    summary_path: str = ""
    failures: list[tuple[str, int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _write_metrics(path: str, records, arm: str, seed: int) -> None:
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        fh.write("\t".join(_METRIC_COLUMNS) + "\n")
        for r in records:
            fh.write(
                "\t".join(
                    (
                        str(r.round),
                        str(r.client),
                        arm,
                        str(seed),
                        "%.17g" % r.test_acc,
                        "%.17g" % r.train_loss,
                        str(int(r.dropped)),
                        str(r.h_peers),
                        str(r.comm_cum),
                    )
                )
                + "\n"
            )


def read_metrics(path: str) -> list[dict]:
    """Parse a metrics.tsv back into per-row dicts with native types."""
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: not a metrics file")
        columns = fh.readline().rstrip("\n").split("\t")
        if tuple(columns) != _METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {columns}")
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            rows.append(
                {
                    "round": int(parts[0]),
                    "client": int(parts[1]),
                    "arm": parts[2],
                    "seed": int(parts[3]),
                    "test_acc": float(parts[4]),
                    "train_loss": float(parts[5]),
                    "dropped": bool(int(parts[6])),
                    "h_peers": int(parts[7]),
                    "comm_cum": int(parts[8]),
                }
            )
    return rows


def _write_divergences(path: str, divergences) -> None:
    with open(path, "w") as fh:
        fh.write(DIVERGENCE_HEADER + "\n")
        for rnd, mat in divergences:
            for i in range(mat.shape[0]):
                row = "\t".join("%.17g" % v for v in mat[i])
                fh.write(f"{rnd}\t{i}\t{row}\n")


def _write_summary(path: str, spec: ExperimentSpec, per_arm: dict) -> None:
    with open(path, "w") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        fh.write("arm\tn_runs\tmean_acc\tstd_acc\n")
        for arm in spec.arms:
            if arm not in per_arm:
                continue
            accs = np.array(per_arm[arm])
            fh.write(
                f"{arm}\t{len(accs)}\t{'%.17g' % accs.mean()}\t{'%.17g' % accs.std()}\n"
            )


def run_matrix(spec: ExperimentSpec) -> MatrixResult:
    """Execute the arm x seed grid and write all metric files.

    I/O failures abort the affected run, the rest of the matrix continues,
    and every failure is reported in the result.
    """
    result = MatrixResult()
    os.makedirs(spec.out_dir, exist_ok=True)
    per_arm: dict[str, list[float]] = {}
    for arm in spec.arms:
        for seed in spec.seeds:
            run_dir = os.path.join(spec.out_dir, f"{arm}_seed{seed}")
            try:
                os.makedirs(run_dir, exist_ok=True)
                ds, part = build_inputs(spec, seed)
                outcome = protocol.run_experiment(
                    ds,
                    part,
                    spec.round_config(arm),
                    seed,
                    record_divergence=spec.record_divergence,
                )
                # Destination is an invocation detail; keeping the field at
                # its default makes snapshots identical across reruns.
                run_spec = replace(spec, arms=(arm,), seeds=(seed,), out_dir="runs")
                with open(os.path.join(run_dir, "run.cfg"), "w") as fh:
                    fh.write(render_config(run_spec))
                metrics_path = os.path.join(run_dir, "metrics.tsv")
                _write_metrics(metrics_path, outcome.records, arm, seed)
                if spec.record_divergence:
                    div_path = os.path.join(run_dir, "divergence.tsv")
                    _write_divergences(div_path, outcome.divergences)
                    result.divergence_paths.append(div_path)
            except OSError as exc:
                result.failures.append((arm, seed, str(exc)))
                continue
            result.run_dirs.append(run_dir)
            result.metrics_paths.append(metrics_path)
            per_arm.setdefault(arm, []).append(outcome.mean_final_accuracy)
    summary_path = os.path.join(spec.out_dir, "summary.txt")
    try:
        _write_summary(summary_path, spec, per_arm)
        result.summary_path = summary_path
    except OSError as exc:
        result.failures.append(("summary", -1, str(exc)))
    return result


def divergence_probe(spec: ExperimentSpec) -> MatrixResult:
    """Run the matrix with per-round pairwise divergence recording forced on."""
    return run_matrix(replace(spec, record_divergence=True))


def write_data_snapshots(spec: ExperimentSpec) -> list[str]:
    """Materialize the dataset and partition for every seed as files."""
    os.makedirs(spec.out_dir, exist_ok=True)
    paths = []
    for seed in spec.seeds:
        ds, part = build_inputs(spec, seed)
        ds_path = os.path.join(spec.out_dir, f"dataset_seed{seed}.tsv")
        part_path = os.path.join(spec.out_dir, f"partition_seed{seed}.tsv")
        datagen.write_dataset(ds, ds_path)
        datagen.write_partition(part, part_path)
        paths.extend((ds_path, part_path))
    return paths


def read_summary(path: str) -> dict[str, tuple[int, float, float]]:
    """Parse summary.txt into arm -> (n_runs, mean_acc, std_acc)."""
    out = {}
    with open(path) as fh:
        if fh.readline().rstrip("\n") != SUMMARY_HEADER:
            raise ValueError(f"{path}: not a summary file")
        fh.readline()
        for line in fh:
            arm, n, mean, std = line.rstrip("\n").split("\t")
            out[arm] = (int(n), float(mean), float(std))
    return out


def read_divergences(path: str) -> list[tuple[int, np.ndarray]]:
    """Parse divergence.tsv back into per-round matrices."""
    rows: dict[int, dict[int, np.ndarray]] = {}
    with open(path) as fh:
        if fh.readline().rstrip("\n") != DIVERGENCE_HEADER:
            raise ValueError(f"{path}: not a divergence file")
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            rnd, client = int(parts[0]), int(parts[1])
            rows.setdefault(rnd, {})[client] = np.array([float(v) for v in parts[2:]])
    out = []
    for rnd in sorted(rows):
        clients = rows[rnd]
        mat = np.stack([clients[i] for i in range(len(clients))])
        out.append((rnd, mat))
    return out
