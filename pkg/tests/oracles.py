"""Independent reference computations for the test-suite.

Reference derivatives come from central finite differences of plain
function evaluations.  The solvers that set up bilevel test instances use
dense Newton steps, but every quantity they feed into a comparison is
checked against its own tolerance first.
"""

import numpy as np
import torch

from bliss.autodiff import ParamVector, ScalarGraph, grad
from bliss.models import ModelConfig, lm_loss, new_proxy


TINY = ModelConfig(vocab_size=5, seq_len=4, d_model=4, n_layers=1, n_heads=2)
TINY_TARGET = ModelConfig(vocab_size=5, seq_len=4, d_model=4, n_layers=2, n_heads=2, family="target")


# -- small graphs for explicit-Hessian comparisons -------------------------
def bigram_graph():
    """Tanh bigram LM with 28 parameters: embed (4x3), head (3x4), bias (4)."""
    gen = torch.Generator().manual_seed(0)
    theta = ParamVector((
        ("emb", torch.randn(4, 3, generator=gen, dtype=torch.float64)),
        ("head", torch.randn(3, 4, generator=gen, dtype=torch.float64)),
        ("bias", torch.randn(4, generator=gen, dtype=torch.float64)),
    ))
    x = torch.tensor([0, 1, 2, 3, 3, 1])
    y = torch.tensor([1, 2, 3, 3, 1, 0])

    def ce(p):
        logits = torch.tanh(p["emb"][x]) @ p["head"] + p["bias"]
        return torch.nn.functional.cross_entropy(logits, y)

    return ScalarGraph(ce, {"p": theta})


def transformer_subset_graph():
    """Tiny transformer LM, differentiated w.r.t. a 40-parameter subset of blocks."""
    cfg = ModelConfig(vocab_size=4, seq_len=3, d_model=2, n_layers=1, n_heads=1)
    full = new_proxy(cfg, 0, torch.float64, std=0.7).params
    free = ["block0.attn.qkv", "block0.mlp.fc", "block0.attn.proj", "final_ln.weight", "lm_head.bias"]
    tokens = np.array([[0, 1, 2], [3, 3, 1], [2, 0, 1]])
    inner = lm_loss(new_proxy(cfg, 0, torch.float64), tokens)

    def fn(p):
        return inner(params=full.replace(p))

    return ScalarGraph(fn, {"p": full.select(free)})



def fd_grad(graph: ScalarGraph, wrt: str, step: float = 1e-5) -> ParamVector:
    """Central finite-difference gradient, one coordinate at a time."""
    theta = graph.inputs[wrt]
    flat = theta.flat().double().clone()
    out = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            e = flat.clone()
            e[i] += step
            hi = float(graph(**{wrt: ParamVector.from_flat(e, theta)}))
            e[i] -= 2 * step
            lo = float(graph(**{wrt: ParamVector.from_flat(e, theta)}))
            out[i] = (hi - lo) / (2 * step)
    return ParamVector.from_flat(out, theta)


def fd_hessian(graph: ScalarGraph, wrt: str, step: float = 1e-5) -> torch.Tensor:
    """Explicit Hessian, column j = central difference of the gradient along e_j."""
    theta = graph.inputs[wrt]
    flat = theta.flat().double().clone()
    n = flat.numel()
    H = torch.empty(n, n, dtype=torch.float64)
    for j in range(n):
        e = flat.clone()
        e[j] += step
        hi = grad(graph.with_inputs(**{wrt: ParamVector.from_flat(e, theta)}), wrt).flat()
        e[j] -= 2 * step
        lo = grad(graph.with_inputs(**{wrt: ParamVector.from_flat(e, theta)}), wrt).flat()
        H[:, j] = (hi - lo) / (2 * step)
    return H


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.double(), b.double()
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def gdls_by_hand(H: np.ndarray, a: np.ndarray, eta: float, k: int, z0=None) -> np.ndarray:
    """z_{k+1} = z_k - eta (H z_k - a), iterated in plain numpy."""
    z = np.zeros_like(a) if z0 is None else z0.copy()
    for _ in range(k):
        z = z - eta * (H @ z - a)
    return z


def random_params(pv: ParamVector, gen: torch.Generator, scale: float = 0.5) -> ParamVector:
    return pv.map(lambda t: torch.randn(t.shape, generator=gen, dtype=torch.float64) * scale)


# -- bilevel oracles ------------------------------------------------------------
def _flat_objective(graph: ScalarGraph, wrt: str, like: ParamVector):
    """Value/gradient and dense-Hessian callables of ``graph`` over a flat vector."""

    def f(x):
        return graph(**{wrt: ParamVector.from_flat(x, like)})

    def fun(x):
        x = torch.as_tensor(x).requires_grad_(True)
        v = f(x)
        (g,) = torch.autograd.grad(v, x)
        return float(v.detach()), g.numpy()

    def hess(x):
        return torch.autograd.functional.hessian(f, torch.as_tensor(x), vectorize=True).numpy()

    return fun, hess


def newton_polish(fun, hess, x, gtol: float, max_iter: int = 40):
    """Saddle-free Newton with backtracking; directions of near-zero curvature are skipped."""
    v, g = fun(x)
    for _ in range(max_iter):
        if np.linalg.norm(g) < gtol:
            break
        w, U = np.linalg.eigh(hess(x))
        keep = np.abs(w) > 1e-10 * np.abs(w).max()
        step = -U[:, keep] @ ((U[:, keep].T @ g) / np.abs(w[keep]))
        t = 1.0
        while t > 1e-8:
            v_new, g_new = fun(x + t * step)
            if v_new < v or np.linalg.norm(g_new) < np.linalg.norm(g):
                break
            t *= 0.5
        x, v, g = x + t * step, v_new, g_new
    return x, float(np.linalg.norm(g))


def solve_lower(problem, theta_p0: ParamVector, theta_s: ParamVector, batch, gtol: float = 1e-10,
                warm: bool = False):
    """Minimise G(., θs) to ||∇G|| < gtol; returns (θp*, ||∇G||).

    L-BFGS brings a cold start into the basin, then dense Newton finishes.
    """
    from scipy.optimize import minimize

    graph = problem.lower_graph(theta_p0, theta_s, batch)
    fun, hess = _flat_objective(graph, "theta_p", theta_p0)
    x = theta_p0.flat().double().numpy()
    if not warm:
        x = minimize(fun, x, jac=True, method="L-BFGS-B",
                     options={"maxiter": 400, "gtol": gtol, "ftol": 0, "maxcor": 50}).x
    x, gn = newton_polish(fun, hess, x, gtol)
    return ParamVector.from_flat(torch.as_tensor(x), theta_p0), gn


def dense_hessian(graph: ScalarGraph, wrt: str) -> np.ndarray:
    return _flat_objective(graph, wrt, graph.inputs[wrt])[1](graph.inputs[wrt].flat().double().numpy())


NEURAL = ModelConfig(vocab_size=5, seq_len=4, d_model=4, n_layers=2, n_heads=2)


def neural_instance(seed: int, lam: float = 0.1, gamma: float = 1.0, rows: int = 6):
    """Two-layer proxy (557 parameters), random score model, same-shape teacher, fixed batches.

    The lower solve starts from the teacher.  lam = 0.1 gives an isolated,
    well-conditioned lower minimum; much weaker regularisation lets the
    LayerNorm-invariant scale of the residual stream drift into regions of
    near-singular curvature.
    """
    from bliss.bilevel import LowerConfig, NeuralProblem
    from bliss.data import TokenDataset
    from bliss.models import new_score, new_target

    cfg, V, T = NEURAL, NEURAL.vocab_size, NEURAL.seq_len
    tcfg = ModelConfig(V, T, cfg.d_model, cfg.n_layers, cfg.n_heads, family="target")
    gen = torch.Generator().manual_seed(seed)
    teacher = new_target(tcfg, seed + 200, torch.float64, std=0.5)
    theta_s = random_params(new_score(cfg, seed + 100, torch.float64, std=0.5).params, gen)
    rng = np.random.default_rng(seed)
    train = TokenDataset(V, T, rng.integers(0, V, (rows, T)).astype(np.uint32)).all()
    val = TokenDataset(V, T, rng.integers(0, V, (rows, T)).astype(np.uint32)).all()
    problem = NeuralProblem(cfg, cfg, teacher, LowerConfig(gamma=gamma, lam=lam))
    return problem, teacher.params.clone(), theta_s, train, val, gen


def neural_fd_check(seed: int, eps: float = 1e-3, n_random: int = 3) -> dict:
    """Closed-form hypergradient vs central differences of Phi(θs) = F(θp*(θs)).

    Phi is differentiated along the hypergradient's own direction and
    ``n_random`` random unit directions; each evaluation re-solves the lower
    problem from θp*.  z comes from a dense least-squares solve polished by
    GDLS, whose reported residual is returned.
    """
    from bliss.autodiff import value_and_grad
    from bliss.bilevel import GdlsConfig, gdls

    problem, theta0, theta_s, train, val, gen = neural_instance(seed)
    theta_p, gn = solve_lower(problem, theta0, theta_s, train)
    _, a = value_and_grad(problem.upper_graph(theta_p, val), "theta_p")
    lower = problem.lower_graph(theta_p, theta_s, train)
    H = dense_hessian(lower, "theta_p")
    z0 = np.linalg.lstsq(H, a.flat().numpy(), rcond=1e-12)[0]
    sol = gdls(lower, a, ParamVector.from_flat(torch.as_tensor(z0), a),
               GdlsConfig(1.0 / np.abs(np.linalg.eigvalsh(H)).max(), 20, warm_start=True, guard=False))
    hg = problem.hypergradient(theta_p, theta_s, sol.z, train)

    def phi(ts):
        p, g = solve_lower(problem, theta_p, ts, train, warm=True)
        return problem.upper_graph(p, val).value(), g

    dirs = [hg.flat()] + [torch.randn(hg.numel(), generator=gen, dtype=torch.float64) for _ in range(n_random)]
    analytic, numeric, resolve = [], [], 0.0
    for u in dirs:
        u = ParamVector.from_flat(u / u.norm(), theta_s)
        hi, g1 = phi(theta_s.zip_map(u, lambda t, d: t + eps * d))
        lo, g2 = phi(theta_s.zip_map(u, lambda t, d: t - eps * d))
        numeric.append((hi - lo) / (2 * eps))
        analytic.append(float(hg.flat() @ u.flat()))
        resolve = max(resolve, g1, g2)
    return {
        "lower_grad_norm": gn,
        "resolve_grad_norm": resolve,
        "gdls_residual": sol.residual,
        "rel_err": rel_err(torch.tensor(analytic), torch.tensor(numeric)),
        "params": theta_p.numel(),
    }


def neural_case(seed, gamma=0.3, lam=0.01, rows=5, teacher=True):
    """Tiny float64 problem with random θp, θs, z and batch, for closed-form vs autodiff checks."""
    from bliss.bilevel import LowerConfig, NeuralProblem
    from bliss.data import TokenDataset
    from bliss.models import new_score, new_target

    gen = torch.Generator().manual_seed(seed)
    proxy = new_proxy(TINY, seed, torch.float64, std=0.5)
    score = new_score(TINY, seed + 1, torch.float64, std=0.5)
    theta_s = random_params(score.params, gen)
    t = new_target(TINY_TARGET, seed + 2, torch.float64, std=0.5) if teacher else None
    rng = np.random.default_rng(seed)
    batch = TokenDataset(TINY.vocab_size, TINY.seq_len,
                         rng.integers(0, TINY.vocab_size, (rows, TINY.seq_len)).astype(np.uint32)).all()
    z = proxy.params.map(lambda x: torch.randn(x.shape, generator=gen, dtype=x.dtype))
    problem = NeuralProblem(TINY, TINY, t, LowerConfig(gamma=gamma, lam=lam, eta1=0.1))
    return problem, proxy.params, theta_s, z, batch
