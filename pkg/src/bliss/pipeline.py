"""Round orchestration: warm-up, bilevel scoring, selection, retraining, evaluation.

Every stage reads its inputs from and writes its outputs to an output
directory, so the staged command-line sequence and :func:`run` produce the
same files.  Layout::

    out_dir/
      config.txt
      data/{train,val,heldout}.bltd
      warmup/{proxy,score,target}.blpv  (+ .manifest sidecars)
      round_<r>/proxy.blpv score.blpv target.blpv scores.tsv selection.txt
                metrics.jsonl loss_curve.csv bilevel.json eval.json

Provenance labels are read in exactly one place, :func:`evaluate`.
"""

from __future__ import annotations

import csv
import json
import math
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import bilevel as bl
from .autodiff import ParamVector, load_params, save_params, value_and_grad
from .config import Config, dump_config
from .data import (
    CLEAN,
    TokenDataset,
    batch_iter,
    load_dataset,
    make_synthetic_corpus,
    partition_shards,
    rng_for,
    sample_bilevel_subset,
    save_dataset,
)
from .models import (
    ModelConfig,
    ProxyModel,
    ScoreModel,
    TargetModel,
    init_score_from_proxy,
    kl_loss,
    mean_ce,
    mean_kl,
    new_proxy,
    new_target,
    read_manifest,
    score_values,
    sgd_train,
    write_manifest,
)

# stage tags for seed derivation
_WARMUP, _BILEVEL, _SUBSET, _SELECT, _RETRAIN, _DISTILL = range(1, 7)
INFER_CHUNK = 50


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def stage_seed(cfg: Config, *key: int) -> int:
    return int(rng_for(cfg.seed, *key).integers(2**31 - 1))


def set_threads() -> None:
    n = os.environ.get("BLISS_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


# -- influence tables and selection -----------------------------------------
@dataclass(frozen=True, eq=False)
class InfluenceTable:
    indices: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if len(self.indices) != len(self.scores):
            raise ValueError("indices and scores differ in length")

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class SelectionResult:
    indices: np.ndarray  # ascending
    cutoff: float
    clean_fraction: float | None = None


def infer_scores(model: ScoreModel, shard: TokenDataset, num_shards: int = 1,
                 chunk: int = INFER_CHUNK) -> InfluenceTable:
    """Score every row of ``shard``.

    Rows are processed in fixed global chunks and the chunks are dealt to
    ``num_shards`` workers, so each row's score does not depend on the
    worker count.
    """
    n = len(shard)
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]

    def run(b):
        lo, hi = b
        tokens = torch.as_tensor(shard.tokens[lo:hi].astype(np.int64))
        with torch.no_grad():
            return score_values(model.params, tokens, model.config).double().numpy()

    workers = max(1, min(num_shards, len(bounds)))
    cap = os.environ.get("BLISS_THREADS")
    if cap:
        workers = min(workers, max(1, int(cap)))
    if workers == 1:
        parts = [run(b) for b in bounds]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, bounds))
    scores = np.concatenate(parts) if parts else np.empty(0)
    return InfluenceTable(np.arange(n), scores)


def selection_size(n: int, fraction: float) -> int:
    return min(n, max(1, math.ceil(fraction * n - 1e-9)))


def select_topk(table: InfluenceTable, fraction: float) -> SelectionResult:
    """Highest scores first, ties to the lower index; ceil(fraction * n) rows."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    k = selection_size(len(table), fraction)
    order = np.lexsort((table.indices, -table.scores))[:k]
    return SelectionResult(np.sort(table.indices[order]), float(table.scores[order[-1]]))


def select_random(n: int, fraction: float, seed: int) -> SelectionResult:
    k = selection_size(n, fraction)
    idx = np.sort(rng_for(seed, _SELECT).choice(n, size=k, replace=False))
    return SelectionResult(idx, float("nan"))


def evaluate(target: ProxyModel, heldout: TokenDataset, selection: SelectionResult | None = None,
             labels: np.ndarray | None = None) -> dict:
    ce = mean_ce(target, heldout)
    out = {"heldout_ce": ce, "heldout_ppl": math.exp(ce)}
    if selection is not None and labels is not None:
        sel = labels[selection.indices]
        out["clean_fraction"] = float(np.mean(sel == CLEAN))
    return out


# -- workspace --------------------------------------------------------------
class Workspace:
    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def round_dir(self, r: int) -> str:
        return f"round_{r}"

    def save_model(self, where: str, name: str, params: ParamVector, mcfg: ModelConfig) -> None:
        save_params(self.path(where, f"{name}.blpv"), params)
        write_manifest(self.path(where, f"{name}.manifest"), mcfg)

    def load_model(self, where: str, name: str, kind=ProxyModel):
        mcfg = read_manifest(self.root / where / f"{name}.manifest")
        params = load_params(self.root / where / f"{name}.blpv", self.cfg.torch_dtype)
        return kind(mcfg, params)

    def dataset(self, name: str, labels: bool = False) -> TokenDataset:
        ds = load_dataset(self.root / "data" / f"{name}.bltd")
        return ds if labels else ds.unlabeled()

    def shard(self, r: int) -> TokenDataset:
        train = self.dataset("train")
        return partition_shards(train, self.cfg.rounds).shard(train, r)

    def shard_labels(self, r: int) -> np.ndarray:
        train = self.dataset("train", labels=True)
        return partition_shards(train, self.cfg.rounds).shard(train, r).labels

    def target_before(self, r: int) -> TargetModel:
        return self.load_model(self.round_dir(r - 1) if r > 0 else "warmup", "target", TargetModel)

    def score_before(self, r: int) -> ScoreModel:
        cfg = self.cfg
        if cfg.score_init_policy == "carry_over":
            for prev in range(r - 1, -1, -1):
                if (self.root / self.round_dir(prev) / "score.blpv").exists():
                    return self.load_model(self.round_dir(prev), "score", ScoreModel)
        return self.load_model("warmup", "score", ScoreModel)


# -- stages -----------------------------------------------------------------
def stage_gen_data(cfg: Config) -> None:
    ws = Workspace(cfg)
    ws.path("config.txt").write_text(dump_config(cfg))
    for name in ("train", "val", "heldout"):
        save_dataset(ws.path("data", f"{name}.bltd"), make_synthetic_corpus(cfg.corpus(name)))


def warmup_all(cfg: Config, dataset: TokenDataset, seed: int):
    """Warm up proxy and target on random training batches; the score model copies the proxy body."""
    dtype = cfg.torch_dtype
    proxy0 = new_proxy(cfg.proxy_config(), seed * 3 + 1, dtype, cfg.init_std)
    target0 = new_target(cfg.target_config(), seed * 3 + 2, dtype, cfg.init_std)
    proxy0, _ = sgd_train(proxy0, dataset, cfg.warmup_steps, cfg.warmup_lr, seed * 3 + 1, cfg.batch_size)
    target0, _ = sgd_train(target0, dataset, cfg.target_warmup_steps, cfg.target_warmup_lr, seed * 3 + 2, cfg.batch_size)
    return proxy0, init_score_from_proxy(proxy0), target0


def stage_warmup(cfg: Config) -> None:
    ws = Workspace(cfg)
    proxy0, score0, target0 = warmup_all(cfg, ws.dataset("train"), stage_seed(cfg, _WARMUP))
    ws.save_model("warmup", "proxy", proxy0.params, proxy0.config)
    ws.save_model("warmup", "score", score0.params, score0.config)
    ws.save_model("warmup", "target", target0.params, target0.config)


def distill(student: ProxyModel, teacher: ProxyModel, data: TokenDataset, steps: int, lr: float,
            seed: int, batch_size: int) -> ProxyModel:
    """Plain SGD on KL(student || teacher)."""
    params = student.params
    batches = batch_iter(data, min(batch_size, len(data)), seed)
    for _ in range(steps):
        _, g = value_and_grad(kl_loss(student.with_params(params), teacher, next(batches)), "params")
        params = params.zip_map(g, lambda t, gt: t - lr * gt)
    return student.with_params(params)


def stage_bilevel(cfg: Config, r: int) -> dict | None:
    """Bilevel training of the score model on a small uniform subset of shard ``r``."""
    if uses_random_selection(cfg, r):
        return None
    ws = Workspace(cfg)
    rd = ws.round_dir(r)
    proxy0 = ws.load_model("warmup", "proxy")
    teacher = ws.target_before(r)
    score0 = ws.score_before(r)
    subset = sample_bilevel_subset(ws.shard(r), cfg.bilevel_fraction, stage_seed(cfg, r, _SUBSET))
    val = ws.dataset("val")
    probe = subset.subset(np.arange(min(64, len(subset))))
    kl_start = mean_kl(proxy0, teacher, probe)

    lower = cfg.lower()
    reset_every, start = 0, proxy0
    if cfg.proxy_reset_policy == "periodic":
        start = distill(proxy0, teacher, subset, cfg.distill_steps, cfg.distill_lr,
                        stage_seed(cfg, r, _DISTILL), cfg.batch_size)
        reset_every = cfg.reset_every
    problem = bl.NeuralProblem(proxy0.config, score0.config, teacher, lower,
                               cfg.weighting, cfg.shard_parallelism)
    state = bl.BilevelState(start.params, score0.params, start.params.zeros_like(), 0, teacher)
    teacher_before = teacher.params.clone()
    result = bl.run_bilevel(
        problem, state, subset, val, lower, cfg.gdls(), cfg.upper(),
        batch_size=cfg.batch_size, seed=stage_seed(cfg, r, _BILEVEL),
        reset_every=reset_every, reset_params=start.params,
    )
    assert teacher.params.equal(teacher_before), "target changed during bilevel training"
    proxy_final = proxy0.with_params(result.theta_p)
    summary = {
        "round": r,
        "steps": cfg.t_steps,
        "bilevel_subset_size": len(subset),
        "kl_start": kl_start,
        "kl_end": mean_kl(proxy_final, teacher, probe),
    }
    ws.save_model(rd, "proxy", result.theta_p, proxy0.config)
    ws.save_model(rd, "score", result.theta_s, score0.config)
    ws.path(rd, "metrics.jsonl").write_text("".join(bl.metrics_line(m) + "\n" for m in result.metrics))
    with open(ws.path(rd, "loss_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lower_loss", "upper_loss", "kl"])
        for m in result.metrics:
            w.writerow([m["t"], repr(m["lower_loss"]), repr(m["upper_loss"]), repr(m["kl"])])
    ws.path(rd, "bilevel.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def write_scores(path: Path, table: InfluenceTable) -> None:
    lines = ["index\tscore"] + [f"{i}\t{s:.9g}" for i, s in zip(table.indices, table.scores)]
    path.write_text("\n".join(lines) + "\n")


def read_scores(path: Path) -> InfluenceTable:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0] != "index\tscore":
        raise ValueError(f"{path}: missing 'index\\tscore' header")
    idx, sc = [], []
    for line in rows[1:]:
        if line.strip():
            i, s = line.split("\t")
            idx.append(int(i))
            sc.append(float(s))
    return InfluenceTable(np.asarray(idx, dtype=np.int64), np.asarray(sc, dtype=np.float64))


def stage_score(cfg: Config, r: int) -> None:
    if uses_random_selection(cfg, r):
        return
    ws = Workspace(cfg)
    model = ws.load_model(ws.round_dir(r), "score", ScoreModel)
    write_scores(ws.path(ws.round_dir(r), "scores.tsv"),
                 infer_scores(model, ws.shard(r), cfg.shard_parallelism))


def uses_random_selection(cfg: Config, r: int) -> bool:
    return cfg.arm == "random" or (r == 0 and cfg.random_first_round)


def stage_select(cfg: Config, r: int, fraction: float | None = None) -> SelectionResult:
    ws = Workspace(cfg)
    fraction = cfg.select_fraction if fraction is None else fraction
    rd = ws.round_dir(r)
    if uses_random_selection(cfg, r):
        sel = select_random(len(ws.shard(r)), fraction, stage_seed(cfg, r, _SELECT))
    else:
        sel = select_topk(read_scores(ws.root / rd / "scores.tsv"), fraction)
    ws.path(rd, "selection.txt").write_text("".join(f"{i}\n" for i in sel.indices))
    return sel


def read_selection(path: Path) -> np.ndarray:
    return np.asarray([int(x) for x in Path(path).read_text().split()], dtype=np.int64)


def stage_retrain(cfg: Config, r: int) -> float:
    """Continue training the target for ``retrain_steps`` SGD steps on the selection."""
    ws = Workspace(cfg)
    rd = ws.round_dir(r)
    target = ws.target_before(r)
    chosen = ws.shard(r).subset(read_selection(ws.root / rd / "selection.txt"))
    target, last = sgd_train(target, chosen, cfg.retrain_steps, cfg.eta4,
                             stage_seed(cfg, r, _RETRAIN), cfg.retrain_batch_size)
    ws.save_model(rd, "target", target.params, target.config)
    return last


def stage_evaluate(cfg: Config, r: int) -> dict:
    ws = Workspace(cfg)
    rd = ws.round_dir(r)
    target = ws.load_model(rd, "target", TargetModel)
    sel = SelectionResult(read_selection(ws.root / rd / "selection.txt"), float("nan"))
    metrics = {"round": r, "arm": cfg.arm}
    metrics.update(evaluate(target, ws.dataset("heldout"), sel, ws.shard_labels(r)))
    ws.path(rd, "eval.json").write_text(json.dumps(metrics, indent=1) + "\n")
    return metrics


def run_round(cfg: Config, r: int, only: Sequence[str] | None = None) -> dict:
    if not 0 <= r < cfg.rounds:
        raise ValueError(f"round {r} outside [0, {cfg.rounds})")
    stages = [
        ("bilevel", lambda: stage_bilevel(cfg, r)),
        ("score", lambda: stage_score(cfg, r)),
        ("select", lambda: stage_select(cfg, r)),
        ("retrain", lambda: stage_retrain(cfg, r)),
        ("evaluate", lambda: stage_evaluate(cfg, r)),
    ]
    out = {name: None for name, _ in stages}
    for name, fn in stages:
        if only is not None and name not in only:
            continue
        try:
            out[name] = fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
    return out


def run(cfg: Config, reuse_from: str | Path | None = None) -> list[dict]:
    """All stages end to end; equivalent to invoking them one by one.

    ``reuse_from`` names the output directory of a run whose data, warm-up
    and randomly selected first round are identical to this one's (same
    config apart from the arm); those files are copied instead of recomputed.
    """
    set_threads()
    if reuse_from is not None:
        return _run_reusing(cfg, Path(reuse_from))
    for name, fn in (("gen-data", lambda: stage_gen_data(cfg)), ("warmup", lambda: stage_warmup(cfg))):
        try:
            fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
    return [run_round(cfg, r) for r in range(cfg.rounds)]


def _run_reusing(cfg: Config, src: Path) -> list[dict]:
    ws = Workspace(cfg)
    ws.path("config.txt").write_text(dump_config(cfg))
    shutil.copytree(src / "data", ws.root / "data", dirs_exist_ok=True)
    shutil.copytree(src / "warmup", ws.root / "warmup", dirs_exist_ok=True)
    out = []
    for r in range(cfg.rounds):
        if r == 0 and cfg.random_first_round:
            dst = ws.root / ws.round_dir(0)
            dst.mkdir(parents=True, exist_ok=True)
            for name in ("selection.txt", "target.blpv", "target.manifest"):
                shutil.copy2(src / ws.round_dir(0) / name, dst / name)
            out.append(run_round(cfg, 0, only=("evaluate",)))
        else:
            out.append(run_round(cfg, r))
    return out


# -- experiment -------------------------------------------------------------
@dataclass
class ExperimentReport:
    seeds: list[int]
    rounds: dict = field(default_factory=dict)  # arm -> seed -> list of per-round dicts

    def final(self, arm: str, key: str) -> list[float]:
        return [self.rounds[arm][s][-1][key] for s in self.seeds]

    def at_round(self, arm: str, r: int, key: str) -> list[float]:
        return [self.rounds[arm][s][r][key] for s in self.seeds]

    def summary(self) -> dict:
        out = {}
        for arm in self.rounds:
            for key in ("heldout_ce", "clean_fraction"):
                vals = np.asarray(self.final(arm, key))
                se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
                out[f"{arm}.final_{key}"] = {"mean": float(vals.mean()), "stderr": se}
        return out

    def to_json(self) -> str:
        return json.dumps({"seeds": self.seeds, "rounds": self.rounds, "summary": self.summary()}, indent=1)


def run_experiment(cfg: Config, seeds: Sequence[int]) -> ExperimentReport:
    """Run the bliss arm and the random-selection arm with matched budgets for every seed."""
    if not seeds:
        raise ValueError("need at least one seed")
    report = ExperimentReport(list(seeds))
    for arm in ("bliss", "random"):
        report.rounds[arm] = {}
        for s in seeds:
            c = cfg.replace(seed=s, arm=arm, out_dir=str(Path(cfg.out_dir) / f"seed_{s}" / arm))
            reuse = None
            if arm == "random" and cfg.random_first_round:
                reuse = Path(cfg.out_dir) / f"seed_{s}" / "bliss"
            per_round = []
            for r, res in enumerate(run(c, reuse_from=reuse)):
                row = dict(res["evaluate"])
                if res["bilevel"]:
                    row.update({k: res["bilevel"][k] for k in ("kl_start", "kl_end")})
                per_round.append(row)
            report.rounds[arm][s] = per_round
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "report.json").write_text(report.to_json() + "\n")
    return report
