"""Desk-scale experiment commands: grids over K, margin rule, and N.

Every command derives one seed per grid point from its master seed with
``SeededRng.split``, keyed only by the swept value (never by the margin
rule), so an eqco run with alpha == K and a fixed run with m == 0 at the
same K are the same trajectory bit for bit.  Outputs are CSV files with
pinned headers plus deterministic SVG charts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .csvlog import CsvLog
from .data import DatasetConfig, make_toy_dataset
from .encoder import (
    MomentumEncoder,
    encode_batch,
    encode_backward_batch,
    init_mlp_params,
    load_checkpoint,
    momentum_update,
    save_checkpoint,
)
from .loss import LossConfig, batch_infonce
from .mi import CorrelatedGaussian, theoretical_bound_mc, true_mi
from .rng import SeededRng
from .svg import Chart, Series, render_svg
from .training import (
    SgdMomentum,
    StepRecord,
    TrainConfig,
    linear_probe,
    lr_at_step,
    scaled_lr,
    train,
)
from .validation import ConfigError, NumericError

MI_SWEEP_HEADER = ["step", "epoch", "k", "alpha", "margin", "loss_nce", "f_hat_bound", "true_mi", "theoretical_bound"]
GRAD_STATS_HEADER = ["epoch", "k", "mode", "grad_norm_mean", "grad_norm_var", "theorem2_bound"]
K_SWEEP_HEADER = ["k", "mode", "alpha", "margin", "final_loss", "f_hat_bound", "probe_acc"]
N_SWEEP_HEADER = ["n", "lr", "final_loss", "probe_acc"]
TRAIN_LOG_HEADER = ["step", "epoch", "lr", "loss", "f_hat_bound", "grad_norm_mean", "grad_norm_var", "theorem2_bound"]
PROBE_HEADER = ["train_frac", "n_train", "n_test", "accuracy"]

EXPERIMENT_KINDS = ("mi_sweep", "grad_stats", "k_sweep", "n_sweep", "train_once", "probe")

# Split-index namespaces; grid values stay far below these.
_DATASET_SPLIT = 1 << 20
_THEORY_SPLIT = 1 << 21
_PROBE_SPLIT = 7


@dataclass(frozen=True)
class MiTaskConfig:
    """The correlated-Gaussian critic task solved by mi_sweep.

    The defaults put the empirical bound in its well-behaved regime at desk
    scale: dim 2 so the m=0 bound ceilings are far apart across K, and a
    soft temperature so the K-sample average inside the weighted loss has
    low enough variance that the equivalent-rule curves coincide even at
    K = 8 with alpha = 512.
    """

    rho: float = 0.9
    dim: int = 2
    tau: float = 0.65
    n_queries: int = 256
    steps_per_epoch: int = 50
    epochs: int = 30
    base_lr: float = 0.04
    warmup_frac: float = 0.1
    sgd_momentum: float = 0.9
    beta: float = 0.99
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    bound_mc_samples: int = 200000


def _default_train_config() -> TrainConfig:
    return TrainConfig(loss=LossConfig(k=64), epochs=12)


def default_train_config(kind: str) -> TrainConfig:
    """Per-command training presets, calibrated for the default dataset.

    k_sweep and grad_stats use per-query subsampled in-batch negatives from
    a 512-query batch (so K up to 256 stays below N-1) and the narrow
    8-dimensional head that makes representation quality respond to the
    negative budget; n_sweep holds K=64 on a bank while N varies.
    """
    if kind in ("k_sweep", "grad_stats"):
        return TrainConfig(
            loss=LossConfig(k=64, tau=0.2, margin_mode="eqco", alpha=256.0),
            n_queries=512,
            neg_source="subsample",
            epochs=16,
            beta=0.9,
            embed_dim=8,
        )
    if kind == "n_sweep":
        return TrainConfig(
            loss=LossConfig(k=64, tau=0.2, margin_mode="fixed", margin=0.0),
            n_queries=256,
            neg_source="bank",
            epochs=10,
            beta=0.9,
            embed_dim=8,
        )
    return _default_train_config()


@dataclass
class ExperimentSpec:
    """One CLI invocation: which command, its grid, and shared settings."""

    kind: str
    out_dir: Path
    seed: int = 0
    train: TrainConfig = field(default_factory=_default_train_config)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    mi: MiTaskConfig = field(default_factory=MiTaskConfig)
    k_values: tuple[int, ...] = ()
    n_values: tuple[int, ...] = ()
    modes: tuple[str, ...] = ("eqco", "fixed")
    alpha: float | None = None
    scale_lr: bool = True
    per_step: bool = False
    train_frac: float = 0.5
    checkpoint: Path | None = None

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        for mode in self.modes:
            if mode not in ("eqco", "fixed"):
                raise ConfigError(f"unknown mode {mode!r}")
        if not self.modes:
            raise ConfigError("modes must not be empty")
        self.out_dir = Path(self.out_dir)


@dataclass
class ExperimentOutput:
    files: dict[str, Path] = field(default_factory=dict)
    logs: dict[str, CsvLog] = field(default_factory=dict)
    summaries: list[str] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def emit(self, line: str) -> None:
        self.summaries.append(line)
        print(line)


def _point_loss_config(k: int, tau: float, mode: str, alpha: float) -> LossConfig:
    if mode == "eqco":
        return LossConfig(k=k, tau=tau, margin_mode="eqco", alpha=alpha)
    return LossConfig(k=k, tau=tau, margin_mode="fixed", margin=0.0)


def _combined_weight(cfg: LossConfig) -> float:
    """K * exp(m/tau): the invariant the equivalent rule keeps fixed."""
    m_over_tau, log_w = cfg.mode_params()
    return cfg.k * math.exp(m_over_tau + log_w)


def _write(spec: ExperimentSpec, out: ExperimentOutput, name: str, content) -> None:
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    path = spec.out_dir / name
    if isinstance(content, CsvLog):
        content.write(path)
        out.logs[name] = content
    else:
        path.write_text(content)
    out.files[name] = path


def train_mi_critic(
    dist: CorrelatedGaussian, loss_cfg: LossConfig, task: MiTaskConfig, seed: int
) -> tuple[list[StepRecord], object]:
    """Train a critic on fresh joint pairs with fresh marginal negatives.

    Negatives are drawn from the key marginal each step and shared across
    the batch; positives and negatives both go through the momentum
    encoder, queries through the trained encoder.
    """
    rng = SeededRng(seed)
    params = init_mlp_params(rng, [dist.dim, *task.hidden_dims, task.embed_dim])
    momentum = MomentumEncoder.from_query(params, task.beta)
    optimizer = SgdMomentum(params, task.sgd_momentum)
    total_steps = task.epochs * task.steps_per_epoch
    log_normalizer = loss_cfg.log_normalizer()

    records: list[StepRecord] = []
    step = 0
    for epoch in range(task.epochs):
        for _ in range(task.steps_per_epoch):
            lr = lr_at_step(step, total_steps, task.warmup_frac, task.base_lr)
            q_raw, k_raw = dist.sample_joint(rng, task.n_queries)
            neg_raw = dist.sample_marginal(rng, loss_cfg.k)
            queries, cache = encode_batch(params, q_raw)
            positives, _ = encode_batch(momentum.params, k_raw)
            pool, _ = encode_batch(momentum.params, neg_raw)
            result = batch_infonce(queries, positives, pool, None, loss_cfg)
            grads, _ = encode_backward_batch(params, cache, result.grad_q / task.n_queries)
            optimizer.step(params, grads, lr)
            momentum_update(momentum, params)
            records.append(
                StepRecord(
                    step=step,
                    epoch=epoch,
                    lr=lr,
                    loss=result.loss,
                    f_hat_bound=log_normalizer - result.loss,
                    grad_norm_mean=float(np.mean(result.grad_norms)),
                    grad_norm_var=float(np.var(result.grad_norms)),
                    theorem2_bound=float(np.mean(result.theorem_bound)),
                )
            )
            step += 1
    return records, params


def _epoch_means(records: list[StepRecord], attr: str) -> dict[int, float]:
    by_epoch: dict[int, list[float]] = {}
    for r in records:
        by_epoch.setdefault(r.epoch, []).append(getattr(r, attr))
    return {e: float(np.mean(v)) for e, v in by_epoch.items()}


def cmd_mi_sweep(spec: ExperimentSpec) -> ExperimentOutput:
    """Critic training per (K, mode); logs loss and empirical bound curves."""
    out = ExperimentOutput()
    dist = CorrelatedGaussian(dim=spec.mi.dim, rho=spec.mi.rho)
    mi = true_mi(dist)
    base = SeededRng(spec.seed)
    k_values = spec.k_values or (8, 64, 512)
    grid_alpha = spec.alpha if spec.alpha is not None else float(max(k_values))

    csv = CsvLog(header=MI_SWEEP_HEADER)
    charts = []
    for mode in spec.modes:
        series = []
        hlines = [("true MI", mi)]
        for k in k_values:
            loss_cfg = _point_loss_config(k, spec.mi.tau, mode, grid_alpha)
            w = _combined_weight(loss_cfg)
            theory = theoretical_bound_mc(
                dist, w, spec.mi.bound_mc_samples, base.split(_THEORY_SPLIT + k)
            )
            records, _ = train_mi_critic(dist, loss_cfg, spec.mi, base.split(k).seed)
            margin = loss_cfg.effective_margin
            losses = _epoch_means(records, "loss")
            f_by_epoch = {e: loss_cfg.log_normalizer() - v for e, v in losses.items()}
            if spec.per_step:
                for r in records:
                    csv.append([r.step, r.epoch, k, w, margin, r.loss, r.f_hat_bound, mi, theory.value])
            else:
                last_step = {r.epoch: r.step for r in records}
                for epoch in sorted(losses):
                    csv.append([last_step[epoch], epoch, k, w, margin, losses[epoch], f_by_epoch[epoch], mi, theory.value])
            epochs_sorted = sorted(losses)
            series.append(Series(label=f"K={k}", xs=epochs_sorted, ys=[f_by_epoch[e] for e in epochs_sorted]))
            hlines.append((f"bound K={k}", theory.value))
            out.emit(
                f"mi_sweep k={k} mode={mode} alpha={w:g} margin={margin:.6g} "
                f"final_loss={losses[epochs_sorted[-1]]:.4f} f_hat_bound={f_by_epoch[epochs_sorted[-1]]:.4f} true_mi={mi:.4f}"
            )
        if mode == "eqco":
            hlines = [("true MI", mi), (f"bound W={grid_alpha:g}", hlines[1][1])]
        charts.append(
            Chart(
                title=f"empirical MI bound ({mode})",
                x_label="epoch",
                y_label="nats",
                series=series,
                hlines=hlines,
            )
        )
    _write(spec, out, "mi_sweep.csv", csv)
    _write(spec, out, "mi_sweep.svg", render_svg(charts))
    return out


def cmd_grad_stats(spec: ExperimentSpec) -> ExperimentOutput:
    """Query-gradient norm statistics per epoch across (K, mode) points."""
    out = ExperimentOutput()
    base = SeededRng(spec.seed)
    dataset = make_toy_dataset(base.split(_DATASET_SPLIT), spec.dataset)
    k_values = spec.k_values or (16, 256)
    grid_alpha = spec.alpha if spec.alpha is not None else spec.train.loss.alpha

    csv = CsvLog(header=GRAD_STATS_HEADER)
    charts = []
    for mode in spec.modes:
        series = []
        for k in k_values:
            loss_cfg = _point_loss_config(k, spec.train.loss.tau, mode, grid_alpha)
            cfg = replace(spec.train, loss=loss_cfg, seed=base.split(k).seed)
            result = train(cfg, dataset)
            means = _epoch_means(result.log, "grad_norm_mean")
            variances = _epoch_means(result.log, "grad_norm_var")
            bounds = _epoch_means(result.log, "theorem2_bound")
            for epoch in sorted(means):
                csv.append([epoch, k, mode, means[epoch], variances[epoch], bounds[epoch]])
            xs = sorted(means)
            series.append(Series(label=f"K={k}", xs=xs, ys=[means[e] for e in xs]))
            out.emit(
                f"grad_stats k={k} mode={mode} final_grad_norm_mean={means[xs[-1]]:.5f} "
                f"final_bound={bounds[xs[-1]]:.5f}"
            )
        charts.append(
            Chart(
                title=f"mean ||dL/dq|| ({mode})",
                x_label="epoch",
                y_label="gradient norm",
                series=series,
            )
        )
    _write(spec, out, "grad_stats.csv", csv)
    _write(spec, out, "grad_stats.svg", render_svg(charts))
    return out


def _probe_encoder(encoder, dataset, train_frac: float, seed: int, n_splits: int = 1) -> float:
    """Linear-probe accuracy, averaged over independent evaluation splits.

    Averaging reduces split noise in the readout without touching the
    probe protocol itself; sweep commands use a few splits so grid-point
    comparisons reflect encoder quality rather than one test draw.
    """
    embeddings, _ = encode_batch(encoder, dataset.latents)
    accs = [
        linear_probe(embeddings, dataset.labels, train_frac, SeededRng(seed).split(_PROBE_SPLIT + i))
        for i in range(n_splits)
    ]
    return float(np.mean(accs))


def cmd_k_sweep(spec: ExperimentSpec) -> ExperimentOutput:
    """Full training + linear probe per (K, mode) on the toy dataset."""
    out = ExperimentOutput()
    base = SeededRng(spec.seed)
    dataset = make_toy_dataset(base.split(_DATASET_SPLIT), spec.dataset)
    k_values = spec.k_values or (4, 16, 64, 256)
    grid_alpha = spec.alpha if spec.alpha is not None else spec.train.loss.alpha

    csv = CsvLog(header=K_SWEEP_HEADER)
    acc_by_mode: dict[str, list[tuple[int, float]]] = {}
    out.extras["epoch_losses"] = {}
    for mode in spec.modes:
        for k in k_values:
            loss_cfg = _point_loss_config(k, spec.train.loss.tau, mode, grid_alpha)
            cfg = replace(spec.train, loss=loss_cfg, seed=base.split(k).seed)
            try:
                result = train(cfg, dataset)
            except NumericError:
                csv.append([k, f"{mode}:failed", "error", "error", "error", "error", "error"])
                _write(spec, out, "k_sweep.csv", csv)
                raise
            final_loss = result.final_epoch_mean("loss")
            f_hat = loss_cfg.log_normalizer() - final_loss
            acc = _probe_encoder(result.encoder, dataset, spec.train_frac, spec.seed, n_splits=4)
            csv.append([k, mode, _combined_weight(loss_cfg), loss_cfg.effective_margin, final_loss, f_hat, acc])
            acc_by_mode.setdefault(mode, []).append((k, acc))
            out.extras["epoch_losses"][(mode, k)] = (
                result.epoch_mean("loss", result.log[0].epoch),
                final_loss,
            )
            out.emit(
                f"k_sweep k={k} mode={mode} final_loss={final_loss:.4f} "
                f"f_hat_bound={f_hat:.4f} probe_acc={acc:.4f}"
            )
    chart = Chart(
        title="linear probe accuracy vs K",
        x_label="K (log2)",
        y_label="accuracy",
        series=[
            Series(label=mode, xs=[math.log2(k) for k, _ in pts], ys=[a for _, a in pts])
            for mode, pts in acc_by_mode.items()
        ],
    )
    _write(spec, out, "k_sweep.csv", csv)
    _write(spec, out, "k_sweep.svg", render_svg([chart]))
    return out


def cmd_n_sweep(spec: ExperimentSpec) -> ExperimentOutput:
    """Vary queries per batch at fixed K; learning rate per the linear rule."""
    out = ExperimentOutput()
    base = SeededRng(spec.seed)
    dataset = make_toy_dataset(base.split(_DATASET_SPLIT), spec.dataset)
    n_values = spec.n_values or (64, 128, 256)

    csv = CsvLog(header=N_SWEEP_HEADER)
    for n in n_values:
        n_ref = spec.train.n_ref if spec.scale_lr else n
        cfg = replace(spec.train, n_queries=n, n_ref=n_ref, seed=base.split(n).seed)
        result = train(cfg, dataset)
        lr = scaled_lr(cfg.base_lr, n, cfg.n_ref)
        final_loss = result.final_epoch_mean("loss")
        acc = _probe_encoder(result.encoder, dataset, spec.train_frac, spec.seed, n_splits=4)
        csv.append([n, lr, final_loss, acc])
        out.emit(f"n_sweep n={n} lr={lr:g} final_loss={final_loss:.4f} probe_acc={acc:.4f}")
    _write(spec, out, "n_sweep.csv", csv)
    return out


def cmd_train_once(spec: ExperimentSpec) -> ExperimentOutput:
    """Single training run: per-step CSV log plus a JSON checkpoint."""
    out = ExperimentOutput()
    base = SeededRng(spec.seed)
    dataset = make_toy_dataset(base.split(_DATASET_SPLIT), spec.dataset)
    cfg = replace(spec.train, seed=spec.seed)

    csv = CsvLog(header=TRAIN_LOG_HEADER)
    try:
        result = train(cfg, dataset)
    except NumericError as exc:
        # Keep the finite prefix of the log; the nonzero exit is the status.
        for r in getattr(exc, "log", []):
            cells = [r.step, r.epoch, r.lr, r.loss, r.f_hat_bound, r.grad_norm_mean, r.grad_norm_var, r.theorem2_bound]
            if all(math.isfinite(c) for c in cells):
                csv.append(cells)
        _write(spec, out, "train_log.csv", csv)
        raise
    for r in result.log:
        csv.append([r.step, r.epoch, r.lr, r.loss, r.f_hat_bound, r.grad_norm_mean, r.grad_norm_var, r.theorem2_bound])
    _write(spec, out, "train_log.csv", csv)
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = spec.out_dir / "checkpoint.json"
    save_checkpoint(ckpt_path, result.encoder, meta={"train_config": cfg.to_dict()})
    out.files["checkpoint.json"] = ckpt_path
    out.emit(
        f"train_once steps={len(result.log)} skipped={result.skipped_steps} "
        f"final_loss={result.final_epoch_mean('loss'):.4f} checkpoint={ckpt_path}"
    )
    return out


def cmd_probe(spec: ExperimentSpec) -> ExperimentOutput:
    """Linear evaluation of a saved encoder on the regenerated toy dataset."""
    if spec.checkpoint is None:
        raise ConfigError("probe requires --checkpoint")
    out = ExperimentOutput()
    params, _ = load_checkpoint(spec.checkpoint)
    base = SeededRng(spec.seed)
    dataset = make_toy_dataset(base.split(_DATASET_SPLIT), spec.dataset)
    if params.layer_dims[0] != dataset.latent_dim:
        raise ConfigError(
            f"checkpoint expects {params.layer_dims[0]}-d inputs, dataset has {dataset.latent_dim}"
        )
    n_train = int(spec.train_frac * dataset.n_instances)
    acc = _probe_encoder(params, dataset, spec.train_frac, spec.seed)
    csv = CsvLog(header=PROBE_HEADER)
    csv.append([spec.train_frac, n_train, dataset.n_instances - n_train, acc])
    _write(spec, out, "probe.csv", csv)
    out.emit(f"probe accuracy={acc:.4f} n_test={dataset.n_instances - n_train}")
    return out


_DISPATCH = {
    "mi_sweep": cmd_mi_sweep,
    "grad_stats": cmd_grad_stats,
    "k_sweep": cmd_k_sweep,
    "n_sweep": cmd_n_sweep,
    "train_once": cmd_train_once,
    "probe": cmd_probe,
}


def run_experiment(spec: ExperimentSpec) -> ExperimentOutput:
    return _DISPATCH[spec.kind](spec)
