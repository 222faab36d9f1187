"""Untargeted transferability attack through an embedding surrogate.

Features are added to the perturbation set a few at a time; only the
selected coordinates move, by Adam steps on the adversarial objective
evaluated on the surrogate. The black-box target sees the final sample
once, and only if the surrogate was fooled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tabadv.attacks.base import AttackOutcome, InvalidStart, free_mask
from tabadv.coherence import tabular_modify
from tabadv.learners.nn import Adam, SurrogateModel, adv_objective, forward_embed
from tabadv.learners.trees import TreeEnsemble, predict


class PoolExhausted(ValueError):
    pass


@dataclass
class FeatureSelector:
    """``variant`` is "random" or "importance"; importance needs ``ranking``.

    ``correlation`` is a d x d matrix of Pearson coefficients; entries of
    features that may not be perturbed are ignored.
    """

    variant: str
    correlation: np.ndarray
    k: int = 2
    n_corr: int = 1
    ranking: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.variant not in ("random", "importance"):
            raise ValueError(f"unknown selector variant {self.variant!r}")
        if self.k < 1 or self.n_corr < 0:
            raise ValueError("k must be >= 1 and n_corr >= 0")
        if self.variant == "importance" and self.ranking is None:
            raise ValueError("importance selection needs a feature ranking")
        self.correlation = np.abs(np.asarray(self.correlation, dtype=np.float64))

    @classmethod
    def from_source(cls, source: TreeEnsemble, benign_rows, correlation, k=2, n_corr=1, name=""):
        """Importance selector ranked by mean |SHAP| of ``source`` on benign rows."""
        from tabadv.shap_eval import mean_abs_shap

        imp = mean_abs_shap(source, benign_rows)
        ranking = np.argsort(-imp, kind="stable")
        return cls("importance", correlation, k, n_corr, ranking, name)


def select_features(sel: FeatureSelector, immutable, already, rng) -> list[int]:
    blocked = set(int(i) for i in immutable) | set(int(i) for i in already)
    d = sel.correlation.shape[0]
    eligible = [i for i in range(d) if i not in blocked]
    if not eligible:
        raise PoolExhausted("pool exhausted: no eligible features left")
    if sel.variant == "random":
        n = min(sel.k, len(eligible))
        picks = [int(i) for i in rng.choice(eligible, size=n, replace=False)]
    else:
        picks = [int(i) for i in sel.ranking if int(i) not in blocked][: sel.k]
    chosen = list(picks)
    taken = blocked | set(picks)
    for p in picks:
        cands = [j for j in range(d) if j not in taken]
        cands.sort(key=lambda j: (-sel.correlation[p, j], j))
        for j in cands[: sel.n_corr]:
            chosen.append(j)
            taken.add(j)
    return chosen


def adv_loss(m: SurrogateModel, x_adv, x, y, alpha=1.0) -> float:
    """-BCE(M(x_adv), y) + alpha * ||phi(x_adv) - phi(x)||_2."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if not (np.all(np.isfinite(x_adv)) and np.all(np.isfinite(x))):
        raise ValueError("non-finite input")
    p = float(m.predict_proba(x_adv)[0])
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    dist = float(np.linalg.norm(forward_embed(m, x_adv) - forward_embed(m, x)))
    out = -bce + alpha * dist
    if not np.isfinite(out):
        raise ValueError("non-finite adversarial loss")
    return float(out)


@dataclass
class TransferConfig:
    lambda_max_l0: int | None = None
    alpha_reg: float = 1.0
    learning_rate: float = 1.0
    inner_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lambda_max_l0 is not None and self.lambda_max_l0 < 1:
            raise ValueError("lambda_max_l0 must be >= 1")


@dataclass
class PerturbationState:
    """Adam moments over the (standardized) input, kept for one attack run."""

    opt: Adam = field(default=None)


def compute_perturbation(m: SurrogateModel, x_adv, x, y, F, cfg: TransferConfig,
                         state: PerturbationState | None = None) -> np.ndarray:
    """One masked Adam step on the adversarial loss; returns the raw-unit update.

    The step is taken in the surrogate's standardized coordinates so one
    learning rate suits features of any scale.
    """
    F = sorted(int(i) for i in F)
    if not F:
        raise ValueError("empty feature set")
    _, g = adv_objective(m, x_adv, x, y, cfg.alpha_reg)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    scale = m.scaler.scale
    gz = np.zeros_like(g)
    gz[F] = g[F] * scale[F]
    if state is None:
        state = PerturbationState()
    if state.opt is None:
        state.opt = Adam([np.zeros_like(g)], lr=cfg.learning_rate)
    dz = state.opt.deltas([gz])[0]
    dz[np.setdiff1d(np.arange(g.size), F)] = 0.0
    return dz * scale


def transfer_attack(surrogate: SurrogateModel, target, x, y, cfg: TransferConfig,
                    sel: FeatureSelector, c, reg=None, rng=None) -> AttackOutcome:
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    if predict(surrogate, x) != y:
        raise InvalidStart("surrogate does not predict the true label on x")
    start = target.queries
    editable = np.flatnonzero(free_mask(c, reg))
    lam = cfg.lambda_max_l0 if cfg.lambda_max_l0 is not None else editable.size
    blocked = set(int(i) for i in range(x.size) if i not in set(editable.tolist()))

    x_adv = x.copy()
    F: list[int] = []
    state = PerturbationState()
    rounds = steps = 0
    while predict(surrogate, x_adv) == y and len(F) < lam:
        try:
            F.extend(select_features(sel, blocked, F, rng))
        except PoolExhausted:
            break
        rounds += 1
        for _ in range(cfg.inner_steps):
            x_adv = x_adv + compute_perturbation(surrogate, x_adv, x, y, F, cfg, state)
            steps += 1
            if predict(surrogate, x_adv) != y:
                break
        x_adv = tabular_modify(x, x_adv, c, reg)

    sur_ok = bool(predict(surrogate, x_adv) != y)
    tr_ok = False
    if sur_ok:
        tr_ok = bool(target.predict(x_adv) != y)
    emb = float(np.linalg.norm(forward_embed(surrogate, x_adv) - forward_embed(surrogate, x)))
    return AttackOutcome(
        success=tr_ok,
        x_adv=x_adv,
        queries=target.queries - start,
        iterations=rounds,
        l2_trace=[],
        surrogate_success=sur_ok,
        transfer_success=tr_ok,
        selected=list(F),
        embedding_distance=emb,
        surrogate_queries=steps,
    )
