"""Bilevel training of the score model against a proxy model.

The lower level trains the proxy on the score-weighted batch loss

    G(θp, θs; ξ) = Σ_i P_i(θs) CE_i(θp) + γ KL(proxy || target) + λ ||θp||²,

and the upper level moves the score model along the implicit hypergradient

    ∇Φ(θs) = -∇²_{θs θp} G · z,     z ≈ [∇²_{θp} G]⁻¹ ∇θp F(θp; ζ),

where ``z`` comes from a few gradient-descent steps on the linear system
(:func:`gdls`).  Everything that depends on the model family lives behind the
:class:`BilevelProblem` interface, so the same loop drives the neural problem
and the analytic quadratic test problem.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Protocol

import numpy as np
import torch

from . import weighting
from .autodiff import (
    HessianOperator,
    ParamVector,
    ScalarGraph,
    grad,
    mixed_vjp,
    value_and_grad,
)
from .data import SampleBatch, TokenDataset, batch_iter
from .models import (
    ModelConfig,
    ProxyModel,
    as_tokens,
    kl_per_position,
    lm_logits,
    per_sample_ce,
    score_values,
    teacher_logits,
)


class OptimizationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LowerConfig:
    gamma: float = 1e-2
    lam: float = 1e-6
    eta1: float = 1e-5
    inner_steps: int = 1

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0 or self.eta1 < 0 or self.inner_steps < 1:
            raise ValueError(f"invalid lower-level config {self}")


@dataclass(frozen=True)
class GdlsConfig:
    eta: float = 1e-2
    k_steps: int = 3
    warm_start: bool = True
    guard: bool = True  # halve eta whenever the residual grows

    def __post_init__(self):
        if self.eta <= 0 or self.k_steps < 1:
            raise ValueError(f"invalid GDLS config {self}")


@dataclass(frozen=True)
class UpperConfig:
    eta3: float = 1e-5
    t_steps: int = 3000

    def __post_init__(self):
        if self.eta3 < 0 or self.t_steps < 0:
            raise ValueError(f"invalid upper-level config {self}")


@dataclass(frozen=True, eq=False)
class BilevelState:
    theta_p: ParamVector
    theta_s: ParamVector
    z: ParamVector
    t: int = 0
    teacher: ProxyModel | None = None

    def __post_init__(self):
        if not self.z.conformant(self.theta_p):
            raise ValueError("z must be conformant with theta_p")


class BilevelProblem(Protocol):
    def lower_graph(self, theta_p: ParamVector, theta_s: ParamVector, batch) -> ScalarGraph: ...

    def upper_graph(self, theta_p: ParamVector, batch) -> ScalarGraph: ...

    def hypergradient(self, theta_p, theta_s, z, batch) -> ParamVector: ...


def graph_hypergradient(problem: BilevelProblem, theta_p, theta_s, z, batch) -> ParamVector:
    """-∇²_{θs θp} G · z through double reverse mode."""
    return -mixed_vjp(problem.lower_graph(theta_p, theta_s, batch), "theta_s", "theta_p", z)


# -- neural problem ---------------------------------------------------------
_TEACHER_CACHE_ROWS = 4096


@dataclass(frozen=True, eq=False)
class NeuralProblem:
    """Proxy/score/target instance of the bilevel problem.

    Inside a graph the weights P_i are plain constants from
    :func:`weighting.batch_weights` unless θs is being differentiated, in
    which case they come from the differentiable softmax.
    """

    proxy_config: ModelConfig
    score_config: ModelConfig
    teacher: ProxyModel | None
    lower: LowerConfig = LowerConfig()
    mode: str = "softmax"
    num_shards: int = 1
    _teacher_cache: dict = field(default_factory=dict, repr=False)

    def weights_tensor(self, theta_s: ParamVector, tokens: torch.Tensor, dtype) -> torch.Tensor:
        h = score_values(theta_s, tokens, self.score_config)
        if h.requires_grad:
            return weighting.torch_weights(h, self.mode).to(dtype)
        w = weighting.batch_weights(h.detach().double().numpy(), self.num_shards, self.mode)
        return torch.as_tensor(w.weights, dtype=dtype)

    def _teacher_logits(self, tokens, dtype, always: bool = False):
        """Teacher logits, cached per row since bilevel subsets are revisited every epoch."""
        if self.teacher is None or (self.lower.gamma == 0 and not always):
            return None
        cache = self._teacher_cache
        keys = [(row.numpy().tobytes(), dtype) for row in tokens]
        missing = [k for k in dict.fromkeys(keys) if k not in cache]
        if missing:
            rows = torch.stack([tokens[keys.index(k)] for k in missing])
            for k, t in zip(missing, teacher_logits(self.teacher, rows, dtype)):
                cache[k] = t
            while len(cache) > _TEACHER_CACHE_ROWS:
                cache.pop(next(iter(cache)))
        return torch.stack([cache[k] for k in keys])

    def lower_graph(self, theta_p, theta_s, batch: SampleBatch) -> ScalarGraph:
        cfg, lc = self.proxy_config, self.lower
        tokens = as_tokens(batch, cfg)
        t_logits = self._teacher_logits(tokens, theta_p.dtype)

        def G(theta_p, theta_s):
            p = theta_p.as_dict()
            logits = lm_logits(p, tokens, cfg)
            ce = _ce_from_logits(logits, tokens, cfg)
            loss = (self.weights_tensor(theta_s, tokens, ce.dtype) * ce).sum()
            if t_logits is not None:
                loss = loss + lc.gamma * kl_per_position(logits, t_logits).mean()
            if lc.lam:
                loss = loss + lc.lam * sum((t * t).sum() for t in theta_p.tensors)
            return loss

        return ScalarGraph(G, {"theta_p": theta_p, "theta_s": theta_s})

    def upper_graph(self, theta_p, batch: SampleBatch) -> ScalarGraph:
        cfg = self.proxy_config
        tokens = as_tokens(batch, cfg)
        return ScalarGraph(
            lambda theta_p: per_sample_ce(theta_p, tokens, cfg).mean(), {"theta_p": theta_p}
        )

    def kl_value(self, theta_p, batch: SampleBatch) -> float:
        if self.teacher is None:
            return float("nan")
        tokens = as_tokens(batch, self.proxy_config)
        with torch.no_grad():
            s = lm_logits(theta_p, tokens, self.proxy_config)
            t = self._teacher_logits(tokens, s.dtype, always=True)
            return float(kl_per_position(s, t).mean())

    def sample_contractions(self, theta_p, z, batch: SampleBatch) -> np.ndarray:
        """c_i = <∇θp CE_i, z> for every row, from a single double-reverse pass."""
        cfg = self.proxy_config
        tokens = as_tokens(batch, cfg)
        leaves = theta_p.map(lambda t: t.detach().clone().requires_grad_(True))
        u = torch.ones(tokens.shape[0], dtype=theta_p.dtype, requires_grad=True)
        loss = (u * per_sample_ce(leaves, tokens, cfg)).sum()
        g = torch.autograd.grad(loss, leaves.tensors, create_graph=True)
        s = sum((gi * zi).sum() for gi, zi in zip(g, z.tensors))
        (c,) = torch.autograd.grad(s, u)
        return c.detach().double().numpy()

    def score_grads(self, theta_s, batch: SampleBatch) -> list[ParamVector]:
        """Per-sample ∇θs h_i."""
        tokens = as_tokens(batch, self.score_config)
        out = []
        for i in range(tokens.shape[0]):
            row = tokens[i:i + 1]
            g = ScalarGraph(
                lambda theta_s: score_values(theta_s, row, self.score_config)[0],
                {"theta_s": theta_s},
            )
            out.append(grad(g, "theta_s"))
        return out

    def batch_weights(self, theta_s, batch: SampleBatch) -> weighting.ImportanceWeights:
        tokens = as_tokens(batch, self.score_config)
        with torch.no_grad():
            h = score_values(theta_s, tokens, self.score_config).double().numpy()
        return weighting.batch_weights(h, self.num_shards, self.mode)

    def hypergradient(self, theta_p, theta_s, z, batch: SampleBatch, per_sample: bool = False) -> ParamVector:
        """Closed-form stochastic hypergradient on a batch.

        ``-Σ_i (∂P_i/∂θs) c_i`` with ``c_i = <∇θp CE_i, z>``.  With
        ``per_sample`` the per-row score gradients are materialised and
        contracted explicitly; otherwise the same linear combination is
        obtained from one backward pass of ``Σ_i coef_i h_i``.
        """
        c = self.sample_contractions(theta_p, z, batch)
        w = self.batch_weights(theta_s, batch)
        if per_sample:
            return -weighting.weight_jacobian_contraction(w, self.score_grads(theta_s, batch), c)
        coef = torch.as_tensor(weighting.contraction_coefficients(w, c), dtype=theta_s.dtype)
        tokens = as_tokens(batch, self.score_config)
        g = ScalarGraph(
            lambda theta_s: (coef * score_values(theta_s, tokens, self.score_config)).sum(),
            {"theta_s": theta_s},
        )
        return -grad(g, "theta_s")


def _ce_from_logits(logits, tokens, cfg):
    nll = torch.nn.functional.cross_entropy(
        logits[:, :-1].reshape(-1, cfg.vocab_size), tokens[:, 1:].reshape(-1), reduction="none"
    )
    return nll.reshape(tokens.shape[0], -1).mean(dim=1)


# -- quadratic test problem --------------------------------------------------
@dataclass(frozen=True, eq=False)
class QuadraticProblem:
    """g = ½||θp - A θs||², f = ½||θp||²; hypergradient is AᵀA θs in closed form."""

    A: torch.Tensor

    def lower_graph(self, theta_p, theta_s, batch=None) -> ScalarGraph:
        A = self.A
        return ScalarGraph(
            lambda theta_p, theta_s: 0.5 * ((theta_p["x"] - A @ theta_s["x"]) ** 2).sum(),
            {"theta_p": theta_p, "theta_s": theta_s},
        )

    def upper_graph(self, theta_p, batch=None) -> ScalarGraph:
        return ScalarGraph(lambda theta_p: 0.5 * (theta_p["x"] ** 2).sum(), {"theta_p": theta_p})

    def hypergradient(self, theta_p, theta_s, z, batch=None) -> ParamVector:
        return graph_hypergradient(self, theta_p, theta_s, z, batch)

    def analytic_hypergradient(self, theta_s: ParamVector) -> ParamVector:
        return ParamVector((("x", self.A.T @ self.A @ theta_s["x"]),))

    def kl_value(self, theta_p, batch=None) -> float:
        return float("nan")


def vec(x) -> ParamVector:
    return ParamVector((("x", torch.as_tensor(x, dtype=torch.float64)),))


# -- the four update rules --------------------------------------------------
def lower_loss(problem: BilevelProblem, theta_p, theta_s, batch) -> ScalarGraph:
    return problem.lower_graph(theta_p, theta_s, batch)


def lower_step(
    problem: BilevelProblem, theta_p: ParamVector, theta_s: ParamVector, batch, cfg: LowerConfig
) -> tuple[ParamVector, float]:
    """``inner_steps`` SGD steps on G over one batch with θs fixed.

    Returns the new θp and the value of G before the first step.
    """
    first = None
    for k in range(cfg.inner_steps):
        graph = problem.lower_graph(theta_p, theta_s, batch)
        try:
            value, g = value_and_grad(graph, "theta_p")
        except ArithmeticError as exc:
            raise OptimizationError(f"lower-level step {k}: {exc}") from exc
        first = value if first is None else first
        theta_p = theta_p.zip_map(g, lambda t, gt: t - cfg.eta1 * gt)
    return theta_p, first


@dataclass(frozen=True, eq=False)
class GdlsResult:
    z: ParamVector
    residual: float  # ||H z_K - a||, or ||H z_{K-1} - a|| when the final product is skipped
    eta: float  # step size after any guard halvings


def gdls(
    hessian_graph: ScalarGraph,
    a: ParamVector,
    z0: ParamVector,
    cfg: GdlsConfig,
    wrt: str = "theta_p",
    final_residual: bool = True,
) -> GdlsResult:
    """K steps of z <- z - eta (H z - a), H the Hessian of ``hessian_graph`` in ``wrt``.

    With ``cfg.guard`` a growing residual rolls back the step and halves eta.
    """
    try:
        H = HessianOperator(hessian_graph, wrt)
    except ArithmeticError as exc:
        raise OptimizationError(f"GDLS linearisation: {exc}") from exc
    z, eta = z0, cfg.eta
    rn = math.nan
    prev_z = prev_r = None
    prev_norm = math.inf
    for k in range(cfg.k_steps):
        try:
            r = H(z) - a
        except ArithmeticError as exc:
            raise OptimizationError(f"GDLS step {k}: {exc}") from exc
        rn = r.norm()
        if cfg.guard and prev_r is not None and rn > prev_norm:
            eta *= 0.5
            z, r, rn = prev_z, prev_r, prev_norm
        prev_z, prev_r, prev_norm = z, r, rn
        z = z.zip_map(r, lambda zt, rt: zt - eta * rt)
    try:
        # without the extra product, report the residual of the last iterate that had one
        res = (H(z) - a).norm() if final_residual else rn
    except ArithmeticError as exc:
        raise OptimizationError(f"GDLS residual: {exc}") from exc
    if not math.isfinite(res):
        raise OptimizationError("GDLS diverged: non-finite residual")
    return GdlsResult(z, res, eta)


def upper_step(theta_s: ParamVector, hypergrad: ParamVector, cfg: UpperConfig) -> ParamVector:
    return theta_s.zip_map(hypergrad, lambda t, g: t - cfg.eta3 * g)


# -- the inner loop of one round --------------------------------------------
@dataclass(frozen=True, eq=False)
class BilevelResult:
    theta_p: ParamVector
    theta_s: ParamVector
    z: ParamVector
    metrics: list[dict] = field(default_factory=list)


def _stream(dataset: TokenDataset | None, batch_size: int, seed: int) -> Iterator:
    if dataset is None:
        while True:
            yield None
    yield from batch_iter(dataset, min(batch_size, len(dataset)), seed)


def run_bilevel(
    problem: BilevelProblem,
    state: BilevelState,
    bilevel_subset: TokenDataset | None,
    validation_set: TokenDataset | None,
    lower: LowerConfig,
    gdls_cfg: GdlsConfig,
    upper: UpperConfig,
    *,
    batch_size: int = 16,
    seed: int = 0,
    metrics_sink: Callable[[dict], None] | None = None,
    reset_every: int = 0,
    reset_params: ParamVector | None = None,
) -> BilevelResult:
    """Run ``upper.t_steps`` alternating proxy / linear-system / score updates.

    Each step draws three independent training batches (lower step, GDLS
    Hessian, mixed partial) and one validation batch.  GDLS and the mixed
    partial both use the proxy after this step's lower update.  With
    ``reset_every > 0`` the proxy returns to ``reset_params`` (and z to zero)
    every ``reset_every`` score steps.
    """
    if bilevel_subset is not None and len(bilevel_subset) == 0:
        raise ValueError("empty bilevel subset")
    xi = _stream(bilevel_subset, batch_size, seed * 4 + 1)
    xi_h = _stream(bilevel_subset, batch_size, seed * 4 + 2)
    pi = _stream(bilevel_subset, batch_size, seed * 4 + 3)
    zeta = _stream(validation_set, batch_size, seed * 4 + 4)
    theta_p, theta_s, z = state.theta_p, state.theta_s, state.z
    metrics = []
    for t in range(upper.t_steps):
        if reset_every and t and t % reset_every == 0:
            theta_p, z = reset_params, z.zeros_like()
        b_low, b_hess, b_mix, b_val = next(xi), next(xi_h), next(pi), next(zeta)
        theta_p, g_value = lower_step(problem, theta_p, theta_s, b_low, lower)
        f_value, a = value_and_grad(problem.upper_graph(theta_p, b_val), "theta_p")
        z0 = z if gdls_cfg.warm_start else z.zeros_like()
        sol = gdls(problem.lower_graph(theta_p, theta_s, b_hess), a, z0, gdls_cfg,
                   final_residual=False)
        z = sol.z
        hg = problem.hypergradient(theta_p, theta_s, z, b_mix)
        theta_s = upper_step(theta_s, hg, upper)
        row = {
            "t": state.t + t,
            "lower_loss": g_value,
            "upper_loss": f_value,
            "kl": problem.kl_value(theta_p, b_low),
            "hypergrad_norm": hg.norm(),
            "z_residual": sol.residual,
        }
        bad = [k for k in ("lower_loss", "upper_loss", "hypergrad_norm") if not math.isfinite(row[k])]
        if bad or not theta_s.is_finite():
            raise OptimizationError(f"non-finite values at step {state.t + t}: {row}")
        metrics.append(row)
        if metrics_sink is not None:
            metrics_sink(row)
    return BilevelResult(theta_p, theta_s, z, metrics)


def metrics_line(row: dict) -> str:
    keys = ("t", "lower_loss", "upper_loss", "kl", "hypergrad_norm", "z_residual")
    return json.dumps({k: _finite_or_none(row[k]) for k in keys})


def _finite_or_none(x):
    return x if not isinstance(x, float) or math.isfinite(x) else None
