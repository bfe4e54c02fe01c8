"""Alternating test-time adaptation of spectral point shifts and classifier weights."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

from . import nn, selftrain
from .graph import GraphConfig, build_outlier_aware_graph
from .pointcloud import PointCloud
from .spectral import (
    band_columns,
    component_count,
    graph_basis,
    modes_needed,
    spectral_descriptor,
)

log = logging.getLogger(__name__)


class AdaptationError(ArithmeticError):
    def __init__(self, message: str, dump: Optional[dict] = None):
        super().__init__(message)
        self.dump = dump or {}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdaptConfig:
    alpha: float = 0.5
    beta1: float = 0.3
    beta2: float = 1000.0
    beta3: float = 3.0
    m_band: int = 100
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    input_steps_per_cycle: int = 4
    model_steps_per_cycle: int = 1
    total_steps: int = 10
    enable_gsdps: bool = True
    enable_gsgma: bool = True
    eigenmap_guided: bool = True
    eigenmap_dim: int = 32
    label_rule: Literal["argmax_sim", "literal_argmin"] = "argmax_sim"
    label_refresh: Literal["every_step", "per_cycle"] = "every_step"
    adapt_scope: Literal["all", "head_only"] = "all"
    band_excludes_zero_modes: bool = False
    reset_per_corruption: bool = True
    shuffle: bool = False
    k: int = 10
    delta: float = 0.1
    gamma: float = 0.6
    distance_mode: Literal["squared", "literal"] = "squared"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("beta1", "beta2", "beta3", "lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.m_band < 1 or self.batch_size < 1 or self.eigenmap_dim < 1:
            raise ConfigError("m_band, batch_size and eigenmap_dim must be positive")
        if self.input_steps_per_cycle < 0 or self.model_steps_per_cycle < 0:
            raise ConfigError("steps per cycle must be nonnegative")
        if self.input_steps_per_cycle + self.model_steps_per_cycle < 1:
            raise ConfigError("a cycle needs at least one step")
        # total_steps = 0 is the explicit no-op run
        if self.total_steps != 0 and self.total_steps < self.input_steps_per_cycle + self.model_steps_per_cycle:
            raise ConfigError("total_steps must cover at least one full cycle (or be 0)")
        for name, allowed in (
            ("label_rule", ("argmax_sim", "literal_argmin")),
            ("label_refresh", ("every_step", "per_cycle")),
            ("adapt_scope", ("all", "head_only")),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        self.graph  # validates k, delta, gamma

    @property
    def graph(self) -> GraphConfig:
        return GraphConfig(self.k, self.delta, self.gamma, self.distance_mode)

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.eigenmap_guided else 1.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "AdaptConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, raw: dict) -> "AdaptConfig":
        """Strict construction from a flat mapping; string values are coerced."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            kwargs[key] = _coerce(key, value, type(getattr(cls(), key)))
        return cls(**kwargs)


def _coerce(key, value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind is float:
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None
    return str(value)


# ----------------------------------------------------------------------------
# Per-cloud spectral preprocessing


@dataclass(frozen=True, eq=False)
class CloudSpectrum:
    band: np.ndarray  # N x M eigenvectors the adjustment acts on
    descriptor: np.ndarray  # eigenmap max-pool
    n_zero: int
    n_outliers: int


def cloud_spectrum(cloud: PointCloud, cfg: AdaptConfig) -> CloudSpectrum:
    """Graph, eigenbasis, adjustment band and spectral descriptor for one cloud.

    Only the lowest modes are solved for; the graph is built once from the
    cloud as given and never rebuilt during adaptation.
    """
    graph = build_outlier_aware_graph(cloud, cfg.graph)
    n = cloud.n
    if cfg.m_band >= n:
        raise ValueError(f"band size M={cfg.m_band} must be smaller than N={n}")
    components = component_count(graph)
    need = modes_needed(components, cfg.m_band, cfg.eigenmap_dim, cfg.band_excludes_zero_modes)
    basis = graph_basis(graph, min(need, n))
    if basis.n_zero != components:
        need = modes_needed(basis.n_zero, cfg.m_band, cfg.eigenmap_dim, cfg.band_excludes_zero_modes)
        if need > basis.n_modes:
            basis = graph_basis(graph, min(need, n))
    band = band_columns(basis, cfg.m_band, cfg.band_excludes_zero_modes)
    return CloudSpectrum(
        np.ascontiguousarray(band),
        spectral_descriptor(basis, cfg.eigenmap_dim),
        basis.n_zero,
        int(graph.outlier_mask.sum()),
    )


def compute_spectra(clouds: Sequence[PointCloud], cfg: AdaptConfig, threads: int = 1) -> list[CloudSpectrum]:
    if threads <= 1 or len(clouds) <= 1:
        return [cloud_spectrum(c, cfg) for c in clouds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda c: cloud_spectrum(c, cfg), clouds))


# ----------------------------------------------------------------------------
# One batch


@dataclass
class StepRecord:
    step: int
    phase: str
    pl: float
    ent: float
    div: float
    cd: Optional[float]
    agreement: Optional[float]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class BatchResult:
    predictions: np.ndarray
    source_predictions: np.ndarray
    model: nn.ClassifierState
    steps: list[StepRecord]
    input_steps: int
    model_steps: int
    deltas: np.ndarray  # B x M x 3 final adjustments
    shifted: list[np.ndarray]


def schedule(cfg: AdaptConfig) -> list[str]:
    """Phase of every step slot: "input" or "model"."""
    cycle = cfg.input_steps_per_cycle + cfg.model_steps_per_cycle
    return ["input" if t % cycle < cfg.input_steps_per_cycle else "model" for t in range(cfg.total_steps)]


def _labels_for(trace, spectra_desc, cfg):
    desc = selftrain.BatchDescriptors(trace.deep_descriptor, spectra_desc, trace.probabilities)
    cents = selftrain.compute_centroids(desc)
    return selftrain.pseudo_label(desc, cents, cfg.effective_alpha, cfg.label_rule).labels


def input_objective(model, trace, originals, shifted, bands, pseudo, cfg):
    """Input-adaptation loss and its gradient with respect to every cloud's adjustment.

    Returns ``(value, grad, parts)`` with ``grad`` shaped B x M x 3.
    """
    pl, ent, div, d_pl, d_ent, d_div = selftrain.batch_losses(trace.probabilities, pseudo)
    _, g_in = nn.backward(model, trace, d_pl + cfg.beta1 * (d_ent + d_div), want_params=False)
    b = len(originals)
    cd_total = 0.0
    grad = np.empty((b, cfg.m_band, 3))
    for i in range(b):
        cd_i, g_cd = selftrain.loss_cd_grad(originals[i], shifted[i])
        cd_total += cd_i
        # chain rule through X_s = X + U_M delta
        grad[i] = bands[i].T @ (g_in[i] + (cfg.beta2 / b) * g_cd)
    parts = selftrain.LossParts(pl, ent, div, cd_total / b)
    return selftrain.loss_input_adaptation(parts, cfg.beta1, cfg.beta2), grad, parts


def model_objective(model, trace, pseudo, cfg):
    """Model-adaptation loss and its parameter gradients."""
    pl, ent, div, d_pl, d_ent, d_div = selftrain.batch_losses(trace.probabilities, pseudo)
    grads, _ = nn.backward(model, trace, d_pl + cfg.beta3 * (d_ent + d_div), want_inputs=False)
    parts = selftrain.LossParts(pl, ent, div)
    return selftrain.loss_model_adaptation(parts, cfg.beta3), grads, parts


def adapt_batch(
    clouds: Sequence[PointCloud],
    model: nn.ClassifierState,
    cfg: AdaptConfig,
    spectra: Optional[Sequence[CloudSpectrum]] = None,
    labels: Optional[np.ndarray] = None,
    threads: int = 1,
    source_model: Optional[nn.ClassifierState] = None,
) -> BatchResult:
    """Adapt one batch.

    ``labels`` are used only for diagnostics. Source-only predictions come from
    ``source_model`` when given, else from ``model``.
    """
    if len(clouds) < 1:
        raise ValueError("empty batch")
    x = [c.points for c in clouds]
    b = len(x)
    source_pred = nn.forward(model if source_model is None else source_model, x).predictions
    use_input = cfg.enable_gsdps
    use_model = cfg.enable_gsgma
    slots = schedule(cfg)
    active = [ph for ph in slots if (ph == "input" and use_input) or (ph == "model" and use_model)]
    if not active:
        return BatchResult(source_pred, source_pred.copy(), model, [], 0, 0, np.zeros((b, cfg.m_band, 3)), x)

    if spectra is None:
        spectra = compute_spectra(clouds, cfg, threads)
    bands = [s.band for s in spectra]
    desc_s = np.stack([s.descriptor for s in spectra])
    delta = np.zeros((b, cfg.m_band, 3))
    d_m = np.zeros_like(delta)
    d_v = np.zeros_like(delta)
    d_step = 0
    n_model = 0
    names = nn.PARAM_NAMES if cfg.adapt_scope == "all" else nn.HEAD_PARAMS
    records = []
    cached_labels = None
    cycle = cfg.input_steps_per_cycle + cfg.model_steps_per_cycle

    def shifted():
        if not use_input:
            return x
        return [xi + ui @ di for xi, ui, di in zip(x, bands, delta)]

    for t, phase in enumerate(slots):
        if (phase == "input" and not use_input) or (phase == "model" and not use_model):
            continue
        xs = shifted()
        trace = nn.forward(model, xs)
        if cfg.label_refresh == "every_step" or cached_labels is None or t % cycle == 0:
            cached_labels = _labels_for(trace, desc_s, cfg)
        pseudo = cached_labels
        cd = None
        if phase == "input":
            objective, grad_delta, parts = input_objective(model, trace, x, xs, bands, pseudo, cfg)
            cd = parts.cd
            _guard(objective, grad_delta, t, phase, parts.pl, parts.ent, parts.div, cd)
            d_step += 1
            delta, d_m, d_v = nn.adamw_update(delta, grad_delta, d_m, d_v, d_step, cfg.lr, cfg.weight_decay)
        else:
            objective, grads, parts = model_objective(model, trace, pseudo, cfg)
            _guard(objective, None, t, phase, parts.pl, parts.ent, parts.div, None)
            model = nn.adamw_step(model, grads, cfg.lr, cfg.weight_decay, names)
            n_model += 1
        pl, ent, div = parts.pl, parts.ent, parts.div
        agree = None if labels is None else float(np.mean(pseudo == np.asarray(labels)))
        records.append(StepRecord(t, phase, pl, ent, div, cd, agree))

    xs = shifted()
    predictions = nn.forward(model, xs).predictions
    return BatchResult(predictions, source_pred, model, records, d_step, n_model, delta, xs)


def _guard(objective, grad, step, phase, pl, ent, div, cd):
    bad = not np.isfinite(objective) or (grad is not None and not np.all(np.isfinite(grad)))
    if bad:
        dump = {"step": step, "phase": phase, "pl": pl, "ent": ent, "div": div, "cd": cd}
        raise AdaptationError(f"non-finite objective at step {step} ({phase}): {dump}", dump)


# ----------------------------------------------------------------------------
# Streams of batches


@dataclass(frozen=True, eq=False)
class StreamItem:
    cloud: PointCloud
    corruption: str = "clean"


@dataclass
class StreamResult:
    predictions: np.ndarray
    source_predictions: np.ndarray
    labels: np.ndarray
    corruptions: list[str]
    batches: list[dict]
    model: nn.ClassifierState
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def accuracy_table(self) -> dict:
        table = {}
        for kind in dict.fromkeys(self.corruptions):
            sel = np.array([c == kind for c in self.corruptions])
            table[kind] = {
                "n": int(sel.sum()),
                "source": float(np.mean(self.source_predictions[sel] == self.labels[sel])),
                "adapted": float(np.mean(self.predictions[sel] == self.labels[sel])),
            }
        return table

    def mean_accuracy(self) -> dict:
        table = self.accuracy_table()
        return {
            "source": float(np.mean([r["source"] for r in table.values()])),
            "adapted": float(np.mean([r["adapted"] for r in table.values()])),
        }


def stream_order(n: int, cfg: AdaptConfig) -> np.ndarray:
    if not cfg.shuffle:
        return np.arange(n)
    return np.random.default_rng([cfg.seed, 7]).permutation(n)


def plan_batches(corruptions: Sequence[str], cfg: AdaptConfig) -> list[list[int]]:
    """Index lists per batch. With per-corruption reset, batches never straddle kinds
    and kinds are visited in order of first appearance."""
    if cfg.reset_per_corruption:
        groups: dict[str, list[int]] = {}
        for i, kind in enumerate(corruptions):
            groups.setdefault(kind, []).append(i)
        seqs = list(groups.values())
    else:
        seqs = [list(range(len(corruptions)))]
    out = []
    for seq in seqs:
        out.extend(seq[i : i + cfg.batch_size] for i in range(0, len(seq), cfg.batch_size))
    return out


def adapt_stream(
    items: Sequence[StreamItem],
    model: nn.ClassifierState,
    cfg: AdaptConfig,
    threads: int = 1,
    spectra: Optional[Sequence[CloudSpectrum]] = None,
) -> StreamResult:
    """Online adaptation over ``items``; the model threads through consecutive batches.

    ``spectra``, when given, is indexed like ``items`` (before any shuffling).
    """
    order = stream_order(len(items), cfg)
    items_o = [items[i] for i in order]
    spectra_o = None if spectra is None else [spectra[i] for i in order]
    kinds = [it.corruption for it in items_o]
    labels = np.array([-1 if it.cloud.label is None else it.cloud.label for it in items_o])
    preds = np.full(len(items_o), -1)
    src = np.full(len(items_o), -1)
    source_model = model
    current = model
    last_kind = None
    reports = []
    for bi, idx in enumerate(plan_batches(kinds, cfg)):
        kind = kinds[idx[0]]
        if cfg.reset_per_corruption and kind != last_kind:
            current = source_model.fresh_optimizer()
        last_kind = kind
        clouds = [items_o[i].cloud for i in idx]
        batch_spectra = None if spectra_o is None else [spectra_o[i] for i in idx]
        truth = labels[idx] if np.all(labels[idx] >= 0) else None
        res = adapt_batch(clouds, current, cfg, batch_spectra, truth, threads, source_model)
        current = res.model
        preds[idx] = res.predictions
        src[idx] = res.source_predictions
        report = {
            "index": bi,
            "corruption": kind if cfg.reset_per_corruption else None,
            "size": len(idx),
            "input_steps": res.input_steps,
            "model_steps": res.model_steps,
            "steps": [r.to_dict() for r in res.steps],
        }
        if truth is not None:
            report["source_accuracy"] = float(np.mean(res.source_predictions == truth))
            report["accuracy"] = float(np.mean(res.predictions == truth))
        reports.append(report)
        log.debug("batch %d (%s): %s", bi, kind, report.get("accuracy"))
    return StreamResult(preds, src, labels, kinds, reports, current, order)


# ----------------------------------------------------------------------------
# Ablation variants

VARIANTS = {
    "source-only": dict(enable_gsdps=False, enable_gsgma=False),
    "GSGMA-only": dict(enable_gsdps=False),
    "GSDPS-only": dict(enable_gsgma=False),
    "deep-feature-guided": dict(eigenmap_guided=False),
    "full": dict(),
}


def variant_config(cfg: AdaptConfig, name: str) -> AdaptConfig:
    return cfg.replace(**VARIANTS[name])


def run_variants(
    items: Sequence[StreamItem],
    model: nn.ClassifierState,
    cfg: AdaptConfig,
    variants: Iterable[str] = tuple(VARIANTS),
    threads: int = 1,
) -> dict[str, StreamResult]:
    """Run several configurations over the same stream.

    With per-corruption reset the kinds are independent, so spectra are
    computed once per kind and shared by every variant. Per-kind results equal
    separate ``adapt_stream`` calls; entries come back grouped by kind.
    """
    variants = list(variants)
    if not cfg.reset_per_corruption or cfg.shuffle:
        out = {}
        for name in variants:
            vcfg = variant_config(cfg, name)
            out[name] = adapt_stream(items, model, vcfg, threads)
        return out
    kinds = list(dict.fromkeys(it.corruption for it in items))
    partial: dict[str, list[StreamResult]] = {name: [] for name in variants}
    for kind in kinds:
        sub = [it for it in items if it.corruption == kind]
        needs_spectra = any(
            variant_config(cfg, v).enable_gsdps or variant_config(cfg, v).enable_gsgma for v in variants
        )
        spectra = compute_spectra([it.cloud for it in sub], cfg, threads) if needs_spectra and cfg.total_steps else None
        for name in variants:
            partial[name].append(adapt_stream(sub, model, variant_config(cfg, name), threads, spectra))
        log.info("finished corruption %s", kind)
    return {name: _concat(parts, model) for name, parts in partial.items()}


def _concat(parts: list[StreamResult], model) -> StreamResult:
    batches = []
    for p in parts:
        for b in p.batches:
            batches.append(dict(b, index=len(batches)))
    offset = 0
    orders = []
    for p in parts:
        orders.append(p.order + offset)
        offset += len(p.order)
    return StreamResult(
        np.concatenate([p.predictions for p in parts]),
        np.concatenate([p.source_predictions for p in parts]),
        np.concatenate([p.labels for p in parts]),
        [k for p in parts for k in p.corruptions],
        batches,
        parts[-1].model if parts else model,
        np.concatenate(orders) if orders else np.zeros(0, dtype=np.int64),
    )


def ablation_table(results: dict[str, StreamResult]) -> list[dict]:
    rows = []
    for name, res in results.items():
        acc = res.accuracy_table()
        row = {"variant": name, "mean": res.mean_accuracy()["adapted"]}
        row.update({k: v["adapted"] for k, v in acc.items()})
        rows.append(row)
    return rows
