"""Label-free, patch-selective attacks on a frozen slide model.

Only the K selected patches of a slide are perturbed.  The objective is the
mean squared displacement of the slide representation from its clean value,
so no task labels or head outputs are needed.  Four update rules are
supported (fgsm, bim, mim, cw) under two strategies:

* parallel: all selected patches are updated jointly from one forward pass
  per iteration;
* sequential: patches are attacked one after another, each on top of the
  perturbations already committed for earlier patches.

The clean representation is an exact stationary point of the objective, so
attacks start from a uniform random point inside ``init_scale * epsilon``.
With ``init_scale = 0`` every gradient is exactly zero and nothing moves.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, IntegrityError, NumericError, UsageError
from .model import BackboneTape, ModelBundle, forward_slide

logger = logging.getLogger(__name__)

METHODS = ("fgsm", "bim", "mim", "cw")
STRATEGIES = ("sequential", "parallel")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "bim"
    epsilon: float = 4 / 255
    alpha: float = 1 / 255
    T: int = 20
    mu: float = 0.9
    c: float = 1.0
    K: int = 1
    strategy: str = "parallel"
    init_scale: float = 0.5
    seed: int = 0

    def validate(self, n_patches: int | None = None) -> None:
        def bad(key, value, rule):
            raise ConfigurationError(f"attack.{key}: {value!r} must satisfy {rule}")

        if self.method not in METHODS:
            bad("method", self.method, f"one of {', '.join(METHODS)}")
        if self.strategy not in STRATEGIES:
            bad("strategy", self.strategy, f"one of {', '.join(STRATEGIES)}")
        # epsilon = 0 is allowed: it is the null attack
        if not 0.0 <= self.epsilon <= 1.0:
            bad("epsilon", self.epsilon, "0 <= epsilon <= 1")
        if not self.alpha > 0:
            bad("alpha", self.alpha, "alpha > 0")
        if self.T < 1:
            bad("T", self.T, "T >= 1")
        if self.mu < 0:
            bad("mu", self.mu, "mu >= 0")
        if not self.c > 0:
            bad("c", self.c, "c > 0")
        if self.K < 1 or (n_patches is not None and self.K > n_patches):
            raise ConfigurationError(f"attack.K: must satisfy 1 ≤ K ≤ N (got K={self.K}, N={n_patches})")
        if not 0.0 <= self.init_scale <= 1.0:
            bad("init_scale", self.init_scale, "0 <= init_scale <= 1")


@dataclass
class AttackTrace:
    losses: list[float] = field(default_factory=list)  # L_MSE at each gradient evaluation
    final_mse: float = 0.0
    per_patch_linf: dict[int, float] = field(default_factory=dict)
    per_patch_l2: dict[int, float] = field(default_factory=dict)
    grad_evals: int = 0
    wall_time: float = 0.0
    zero_gradient: bool = False


@dataclass
class AttackOutcome:
    slide_id: int
    config: AttackConfig
    selection: tuple[int, ...]
    perturbation: dict[int, np.ndarray]
    adv_pixels: np.ndarray
    trace: AttackTrace

    @property
    def final_mse(self) -> float:
        return self.trace.final_mse

    def to_record(self) -> dict:
        cfg = self.config
        return {
            "slide_id": self.slide_id,
            "method": cfg.method,
            "K": cfg.K,
            "epsilon": cfg.epsilon,
            "strategy": cfg.strategy,
            "seed": cfg.seed,
            "init_scale": cfg.init_scale,
            "final_mse": self.trace.final_mse,
            "mse_trajectory": list(self.trace.losses),
            "per_patch_linf": [self.trace.per_patch_linf[i] for i in self.selection],
            "per_patch_l2": [self.trace.per_patch_l2[i] for i in self.selection],
        }


# --- elementary pieces -----------------------------------------------------------

def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from integer parts (order-sensitive)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def select_patches(slide, K: int, seed: int) -> tuple[int, ...]:
    """Uniform random K-subset of patch indices, in draw order."""
    n = slide if isinstance(slide, (int, np.integer)) else len(getattr(slide, "pixels", slide))
    if not 1 <= K <= n:
        raise UsageError(f"select_patches: K={K} must satisfy 1 <= K <= N={n}")
    rng = np.random.default_rng(seed)
    return tuple(int(i) for i in rng.choice(n, size=K, replace=False))


def project_clip(x_clean, x_candidate, epsilon: float) -> np.ndarray:
    """Clamp into the L-inf ball of radius epsilon around x_clean, then into [0, 1]."""
    x_clean = np.asarray(x_clean, dtype=np.float64)
    out = np.clip(np.asarray(x_candidate, dtype=np.float64), x_clean - epsilon, x_clean + epsilon)
    return np.clip(out, 0.0, 1.0)


def random_init(
    clean: Mapping[int, np.ndarray] | np.ndarray,
    selection: Sequence[int],
    epsilon: float,
    init_scale: float,
    seed: int | np.random.Generator,
) -> dict[int, np.ndarray]:
    """Uniform start offsets in [-init_scale*eps, init_scale*eps], kept inside [0, 1].

    ``clean`` is the slide pixel array (or an index -> patch mapping).
    """
    if not 0.0 <= init_scale <= 1.0:
        raise UsageError(f"init_scale {init_scale!r} must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    radius = init_scale * epsilon
    out = {}
    for i in selection:
        x = np.asarray(clean[i], dtype=np.float64)
        delta = rng.uniform(-radius, radius, size=x.shape)
        out[int(i)] = np.clip(x + delta, 0.0, 1.0) - x
    return out


def defend_noise(slide, amplitude: float, seed: int):
    """Add U[-amplitude, amplitude] noise to every pixel, clamped to [0, 1].

    Accepts a Slide (returns a Slide) or a pixel array (returns an array).
    """
    if amplitude < 0:
        raise UsageError(f"defence amplitude {amplitude!r} must be >= 0")
    pixels = np.asarray(getattr(slide, "pixels", slide), dtype=np.float64)
    if amplitude == 0:
        noisy = pixels.copy()
    else:
        rng = np.random.default_rng(seed)
        noisy = np.clip(pixels + rng.uniform(-amplitude, amplitude, size=pixels.shape), 0.0, 1.0)
    if hasattr(slide, "with_pixels"):
        return slide.with_pixels(noisy)
    return noisy


def _fingerprint(pixels: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(pixels).tobytes()).hexdigest()


# --- objective -------------------------------------------------------------------

class FeatureObjective:
    """L_MSE for one slide with a per-patch feature cache.

    The clean representation ``z_clean`` is computed once here and never
    recomputed.  ``features`` holds the encoder output of every patch of the
    current working slide; only patches being optimised are re-encoded.
    """

    def __init__(self, bundle: ModelBundle, slide):
        if not bundle.frozen:
            raise UsageError("attacks require a frozen bundle")
        self.bundle = bundle
        pixels = np.asarray(getattr(slide, "pixels", slide), dtype=np.float64)
        clean = forward_slide(bundle, pixels)
        self.clean_pixels = pixels.copy()
        self.clean_pixels.flags.writeable = False
        self.z_clean = clean.z.copy()
        self.z_clean.flags.writeable = False
        self.features = clean.features.copy()
        self.pixels = pixels.copy()
        self._fingerprint = _fingerprint(self.pixels)
        self.grad_evals = 0

    @property
    def n_patches(self) -> int:
        return self.pixels.shape[0]

    def check(self, pixels: np.ndarray) -> None:
        """Raise if ``pixels`` differ from the slide the cache describes."""
        if _fingerprint(np.asarray(pixels, dtype=np.float64)) != self._fingerprint:
            raise IntegrityError("feature cache is stale: slide pixels changed outside the attacked set")

    def evaluate(
        self,
        patches: Mapping[int, np.ndarray],
        cw_c: float | None = None,
        need_grad: bool = True,
    ) -> tuple[float, float, dict[int, np.ndarray]]:
        """Loss at the given candidate patches.

        Returns ``(l_mse, objective, grads)``.  Without ``cw_c`` the objective
        is L_MSE itself (to be maximised).  With ``cw_c`` it is
        ``sum_i ||x_i - clean_i||_2 - cw_c * L_MSE`` (to be minimised).
        Gradients are taken with respect to the candidate patch pixels.
        """
        bt = BackboneTape(self.bundle)
        tape = bt.tape
        order = sorted(patches)
        leaves = {}
        rows = {}
        for i in order:
            if not 0 <= i < self.n_patches:
                raise UsageError(f"patch index {i} out of range")
            x = np.asarray(patches[i], dtype=np.float64)
            leaves[i] = tape.leaf(x.reshape(1, -1), name=f"x{i}")
            rows[i] = bt.encode_row(leaves[i])
        pieces = []
        start = 0
        for i in order:
            if i > start:
                pieces.append(tape.constant(self.features[start:i]))
            pieces.append(rows[i])
            start = i + 1
        if start < self.n_patches:
            pieces.append(tape.constant(self.features[start:]))
        feats = ad.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
        z_hat, _ = bt.aggregate(feats)
        loss = ad.mse(z_hat, tape.constant(self.z_clean))
        objective = loss
        if cw_c is not None:
            norms = [
                ad.l2_norm(leaves[i] - tape.constant(self.clean_pixels[i].reshape(1, -1)))
                for i in order
            ]
            total = norms[0]
            for n in norms[1:]:
                total = total + n
            objective = total - loss * cw_c
        grads: dict[int, np.ndarray] = {}
        if need_grad:
            self.grad_evals += 1
            raw = tape.backward(objective, [leaves[i] for i in order])
            grads = {i: raw[leaves[i]].reshape(self.pixels.shape[1:]) for i in order}
        return float(loss.value), float(objective.value), grads

    def commit(self, index: int, patch: np.ndarray) -> None:
        """Freeze a perturbed patch into the working slide and its cache."""
        patch = np.asarray(patch, dtype=np.float64)
        bt = BackboneTape(self.bundle)
        self.features[index] = bt.encode_row(bt.tape.constant(patch.reshape(1, -1))).value[0]
        self.pixels[index] = patch
        self._fingerprint = _fingerprint(self.pixels)


def feature_loss(bundle: ModelBundle, slide, perturbation: Mapping[int, np.ndarray], cache: FeatureObjective | None = None):
    """L_MSE of ``slide`` with ``perturbation`` added, and its pixel gradients.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``perturbation``.
    """
    pixels = np.asarray(getattr(slide, "pixels", slide), dtype=np.float64)
    if cache is None:
        cache = FeatureObjective(bundle, pixels)
    else:
        cache.check(pixels)
    patches = {int(i): pixels[i] + d for i, d in perturbation.items()}
    loss, _, grads = cache.evaluate(patches)
    return loss, grads


# --- update rules ------------------------------------------------------------------

def _sign_step(clean, current, direction, step, epsilon):
    return {i: project_clip(clean[i], current[i] + step * np.sign(direction[i]), epsilon) for i in current}


def momentum_update(g_prev: np.ndarray, grad: np.ndarray, mu: float) -> np.ndarray:
    """mu * g_prev + grad / ||grad||_1, with a zero increment when grad is 0."""
    norm = np.abs(grad).sum()
    step = grad / norm if norm > 0 else np.zeros_like(grad)
    return mu * g_prev + step


def _optimise(obj: FeatureObjective, indices: Sequence[int], start: dict[int, np.ndarray], cfg: AttackConfig, trace: AttackTrace) -> dict[int, np.ndarray]:
    clean = {i: obj.clean_pixels[i] for i in indices}
    x = {i: start[i] for i in indices}

    if cfg.method == "fgsm":
        loss, _, g = obj.evaluate(x)
        trace.losses.append(loss)
        if all(not np.any(g[i]) for i in indices):
            trace.zero_gradient = True
            logger.warning("fgsm: zero gradient at start point; returning the initial perturbation")
        return _sign_step(clean, x, g, cfg.epsilon, cfg.epsilon)

    if cfg.method == "bim":
        for _ in range(cfg.T):
            loss, _, g = obj.evaluate(x)
            trace.losses.append(loss)
            x = _sign_step(clean, x, g, cfg.alpha, cfg.epsilon)
        return x

    if cfg.method == "mim":
        momentum = {i: np.zeros_like(x[i]) for i in indices}
        for _ in range(cfg.T):
            loss, _, g = obj.evaluate(x)
            trace.losses.append(loss)
            for i in indices:
                momentum[i] = momentum_update(momentum[i], g[i], cfg.mu)
            x = _sign_step(clean, x, momentum, cfg.alpha, cfg.epsilon)
        return x

    if cfg.method == "cw":
        for t in range(cfg.T):
            try:
                loss, _, g = obj.evaluate(x, cw_c=cfg.c)
            except NumericError as exc:
                raise NumericError(f"cw iteration {t}: {exc}") from exc
            trace.losses.append(loss)
            x = {i: x[i] - cfg.alpha * g[i] for i in indices}
        return {i: project_clip(clean[i], x[i], cfg.epsilon) for i in indices}

    raise ConfigurationError(f"attack.method: unknown method {cfg.method!r}")


def _finish(obj: FeatureObjective, slide, cfg, selection, trace, t0) -> AttackOutcome:
    adv = obj.pixels.copy()
    delta = {i: adv[i] - obj.clean_pixels[i] for i in selection}
    trace.final_mse = obj.evaluate({}, need_grad=False)[0] if selection else 0.0
    trace.per_patch_linf = {i: float(np.abs(d).max()) for i, d in delta.items()}
    trace.per_patch_l2 = {i: float(np.sqrt((d * d).sum())) for i, d in delta.items()}
    trace.grad_evals = obj.grad_evals
    trace.wall_time = time.perf_counter() - t0
    adv.flags.writeable = False
    return AttackOutcome(int(getattr(slide, "slide_id", -1)), cfg, tuple(selection), delta, adv, trace)


def _prepare(bundle, slide, cfg, selection):
    pixels = np.asarray(getattr(slide, "pixels", slide), dtype=np.float64)
    n = pixels.shape[0]
    cfg.validate(n)
    sel_seed, init_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    if selection is None:
        selection = select_patches(n, cfg.K, int(sel_seed))
    else:
        selection = tuple(int(i) for i in selection)
        if len(set(selection)) != len(selection) or not all(0 <= i < n for i in selection):
            raise UsageError(f"selection {selection} must hold distinct indices in [0, {n})")
    obj = FeatureObjective(bundle, pixels)
    init = random_init(obj.clean_pixels, selection, cfg.epsilon, cfg.init_scale, int(init_seed))
    start = {i: obj.clean_pixels[i] + init[i] for i in selection}
    return obj, selection, start


def parallel_attack(bundle: ModelBundle, slide, cfg: AttackConfig, selection: Sequence[int] | None = None) -> AttackOutcome:
    """Optimise all selected patches jointly, one forward pass per iteration."""
    t0 = time.perf_counter()
    obj, selection, start = _prepare(bundle, slide, cfg, selection)
    trace = AttackTrace()
    final = _optimise(obj, selection, start, cfg, trace)
    for i in selection:
        obj.commit(i, final[i])
    return _finish(obj, slide, cfg, selection, trace, t0)


def sequential_attack(bundle: ModelBundle, slide, cfg: AttackConfig, selection: Sequence[int] | None = None) -> AttackOutcome:
    """Optimise selected patches one at a time, in selection order.

    Each finished patch is committed to the working slide before the next
    one starts; the clean reference representation never changes.
    """
    t0 = time.perf_counter()
    obj, selection, start = _prepare(bundle, slide, cfg, selection)
    trace = AttackTrace()
    for i in selection:
        final = _optimise(obj, [i], start, cfg, trace)
        obj.commit(i, final[i])
    return _finish(obj, slide, cfg, selection, trace, t0)


def fgsm_attack(bundle, slide, selection, cfg: AttackConfig) -> AttackOutcome:
    return _single(bundle, slide, selection, cfg, "fgsm")


def bim_attack(bundle, slide, selection, cfg: AttackConfig) -> AttackOutcome:
    return _single(bundle, slide, selection, cfg, "bim")


def mim_attack(bundle, slide, selection, cfg: AttackConfig) -> AttackOutcome:
    return _single(bundle, slide, selection, cfg, "mim")


def cw_attack(bundle, slide, selection, cfg: AttackConfig) -> AttackOutcome:
    return _single(bundle, slide, selection, cfg, "cw")


def _single(bundle, slide, selection, cfg, method):
    if cfg.method != method:
        raise UsageError(f"{method}_attack called with cfg.method={cfg.method!r}")
    return run_attack(bundle, slide, cfg, selection)


def run_attack(bundle: ModelBundle, slide, cfg: AttackConfig, selection: Sequence[int] | None = None) -> AttackOutcome:
    if cfg.strategy == "sequential":
        return sequential_attack(bundle, slide, cfg, selection)
    if cfg.strategy == "parallel":
        return parallel_attack(bundle, slide, cfg, selection)
    raise ConfigurationError(f"attack.strategy: unknown strategy {cfg.strategy!r}")
