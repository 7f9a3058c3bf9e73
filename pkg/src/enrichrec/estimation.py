"""Joint estimation of enrichment/temptation factors from ratings and clicks.

Parameters are fitted by minibatch stochastic gradient descent (Adam steps)
on ``alpha * L_rating + beta * L_click``:

* ``L_rating`` is the squared error between observed ratings and
  ``f_rating(lambda_f * u + (1 - lambda_f) * v)``;
* ``L_click`` sums, per round, the hinge ``max(0, C(i) - C(chosen))`` over
  every option the user passed on. The outside option scores ``mu``.

Constraints hold by construction: the first components of ``a`` and ``b`` are
constants, ``lambda_f = sigmoid(t_f)``, ``lambda_c = lambda_f * sigmoid(t_c)``
and ``sigma = exp(log_sigma)``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_ndtr, ndtr

from .core import OUTSIDE, IdentityRating, InteractionLog, RatingMap, mix, rating_map_from_dict
from .errors import ConfigurationError, InputError, TrainingError
from .policies import OutsideBelief

_logger = logging.getLogger(__name__)

MODEL_FORMAT = "enrichrec.model/1"


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    """Interaction log plus explicit ratings for ``n_users`` x ``n_items``."""

    interactions: InteractionLog
    rating_user: np.ndarray
    rating_item: np.ndarray
    rating_value: np.ndarray
    n_users: int
    n_items: int

    def __post_init__(self):
        self.rating_user = np.asarray(self.rating_user, dtype=np.int64)
        self.rating_item = np.asarray(self.rating_item, dtype=np.int64)
        self.rating_value = np.asarray(self.rating_value, dtype=float)
        if not (self.rating_user.shape == self.rating_item.shape == self.rating_value.shape):
            raise InputError("rating columns must have equal length")
        log = self.interactions
        if np.any(log.user >= self.n_users) or np.any(self.rating_user >= self.n_users):
            raise InputError("user id out of range")
        if np.any(log.slates >= self.n_items) or np.any(self.rating_item >= self.n_items):
            raise InputError("item id out of range")
        if self.rating_value.size:
            chosen = set(zip(log.user[log.on_platform].tolist(), log.chosen[log.on_platform].tolist()))
            for j, i in zip(self.rating_user.tolist(), self.rating_item.tolist()):
                if (j, i) not in chosen:
                    raise InputError(f"rating for (user {j}, item {i}) has no matching on-platform choice")

    @classmethod
    def from_log(cls, log: InteractionLog, n_users: int, n_items: int) -> "Dataset":
        """Ratings are taken from the rated on-platform rows of the log."""
        keep = log.on_platform & ~np.isnan(log.rating)
        return cls(log, log.user[keep], log.chosen[keep], log.rating[keep], n_users, n_items)

    @property
    def n_ratings(self) -> int:
        return self.rating_value.size

    @property
    def n_rounds(self) -> int:
        return len(self.interactions)

    def ratings(self) -> list:
        return list(zip(self.rating_user.tolist(), self.rating_item.tolist(), self.rating_value.tolist()))


@dataclass
class TrainConfig:
    alpha: float = 0.5
    learning_rate: float = 0.05
    epochs: int = 300
    minibatch_size: int = 512
    latent_dim: int = 3
    seed: int = 0
    init_scale: float = 0.1
    convergence_tol: float = 1e-6
    patience: int = 10
    l2: float = 0.1
    temperature: Optional[float] = None  # softplus width; None -> 0.05 * score scale, 0 -> exact hinge
    freeze_lambda_f: Optional[float] = None
    init_lambda_f: float = 0.75
    init_lambda_c: float = 0.25
    sigma_method: str = "censored_mle"  # or "threshold_std"
    lr_decay: float = 0.5  # step-size factor after `patience` stale epochs
    min_lr_fraction: float = 1.0 / 32.0  # stop once the step size falls below this share

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if self.learning_rate <= 0 or self.init_scale <= 0 or self.convergence_tol <= 0:
            raise ConfigurationError("learning_rate, init_scale and convergence_tol must be positive")
        if self.epochs < 1 or self.minibatch_size < 1 or self.latent_dim < 1:
            raise ConfigurationError("epochs, minibatch_size and latent_dim must be positive")
        if self.freeze_lambda_f is not None and not 0.0 < self.freeze_lambda_f <= 1.0:
            raise ConfigurationError("freeze_lambda_f must lie in (0, 1]")
        if not 0.0 < self.init_lambda_c < self.init_lambda_f < 1.0:
            raise ConfigurationError("need 0 < init_lambda_c < init_lambda_f < 1")
        if not 0.0 < self.lr_decay <= 1.0 or not 0.0 < self.min_lr_fraction <= 1.0:
            raise ConfigurationError("lr_decay and min_lr_fraction must lie in (0, 1]")
        if self.sigma_method not in ("censored_mle", "threshold_std"):
            raise ConfigurationError("sigma_method must be 'censored_mle' or 'threshold_std'")

    @property
    def beta(self) -> float:
        return 1.0 - self.alpha


# ---------------------------------------------------------------------------
# fitted model


@dataclass
class EstimatedModel:
    a_hat: np.ndarray
    b_hat: np.ndarray
    x_hat: np.ndarray
    y_hat: np.ndarray
    lambda_f_hat: np.ndarray
    lambda_c_hat: np.ndarray
    mu: float
    sigma: float
    expected_outside_enrichment: np.ndarray
    f_rating: RatingMap = field(default_factory=IdentityRating)
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("a_hat", "b_hat", "x_hat", "y_hat"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        for name in ("lambda_f_hat", "lambda_c_hat", "expected_outside_enrichment"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be positive")
        if np.any(self.a_hat[:, 0] != 1.0) or np.any(self.b_hat[:, 0] != 1.0):
            raise ConfigurationError("first components of a_hat and b_hat must equal 1")
        if np.any(self.lambda_c_hat > self.lambda_f_hat):
            raise ConfigurationError("lambda_c_hat must not exceed lambda_f_hat")
        if self.expected_outside_enrichment.size == 0:
            self.expected_outside_enrichment = np.zeros(self.n_users)

    @property
    def n_users(self) -> int:
        return self.a_hat.shape[0]

    @property
    def n_items(self) -> int:
        return self.x_hat.shape[0]

    def u_hat(self) -> np.ndarray:
        return self.a_hat @ self.x_hat.T

    def v_hat(self) -> np.ndarray:
        return self.b_hat @ self.y_hat.T

    def choice_scores(self) -> np.ndarray:
        return mix(self.lambda_c_hat[:, None], self.u_hat(), self.v_hat())

    def feedback_scores(self) -> np.ndarray:
        return mix(self.lambda_f_hat[:, None], self.u_hat(), self.v_hat())

    def predicted_ratings(self) -> np.ndarray:
        return np.asarray(self.f_rating(self.feedback_scores()), dtype=float)

    def recover_scores(self, user: int, item: int) -> tuple:
        return float(self.a_hat[user] @ self.x_hat[item]), float(self.b_hat[user] @ self.y_hat[item])

    def choice_probability(self, user: int, item: int) -> float:
        u, v = self.recover_scores(user, item)
        c = mix(self.lambda_c_hat[user], u, v)
        return float(ndtr((c - self.mu) / self.sigma))

    def belief(self) -> OutsideBelief:
        return OutsideBelief(self.mu, self.sigma, self.expected_outside_enrichment)

    # persistence
    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "a_hat": self.a_hat.tolist(),
            "b_hat": self.b_hat.tolist(),
            "x_hat": self.x_hat.tolist(),
            "y_hat": self.y_hat.tolist(),
            "lambda_f_hat": self.lambda_f_hat.tolist(),
            "lambda_c_hat": self.lambda_c_hat.tolist(),
            "mu": float(self.mu),
            "sigma": float(self.sigma),
            "expected_outside_enrichment": self.expected_outside_enrichment.tolist(),
            "f_rating": self.f_rating.to_dict(),
            "config": self.config,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EstimatedModel":
        if data.get("format") != MODEL_FORMAT:
            raise InputError(f"unsupported model format {data.get('format')!r}")
        return cls(
            a_hat=data["a_hat"], b_hat=data["b_hat"], x_hat=data["x_hat"], y_hat=data["y_hat"],
            lambda_f_hat=data["lambda_f_hat"], lambda_c_hat=data["lambda_c_hat"],
            mu=data["mu"], sigma=data["sigma"],
            expected_outside_enrichment=data["expected_outside_enrichment"],
            f_rating=rating_map_from_dict(data.get("f_rating", {})),
            config=data.get("config", {}), history=data.get("history", []),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "EstimatedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# losses on a fitted model


def rating_loss(model: EstimatedModel, ratings, f_rating: Optional[RatingMap] = None) -> float:
    """Sum of squared rating residuals over ``(user, item, rating)`` triples."""
    f_rating = f_rating or model.f_rating
    ratings = list(ratings)
    if not ratings:
        return 0.0
    j, i, r = (np.asarray(col) for col in zip(*ratings))
    j = j.astype(np.int64)
    i = i.astype(np.int64)
    u = np.einsum("kd,kd->k", model.a_hat[j], model.x_hat[i])
    v = np.einsum("kd,kd->k", model.b_hat[j], model.y_hat[i])
    pred = f_rating(mix(model.lambda_f_hat[j], u, v))
    return float(np.sum((r.astype(float) - pred) ** 2))


def _round_scores(log: InteractionLog, u_rows, v_rows, lam_c):
    """Estimated choice scores of each slate entry (NaN on padding)."""
    valid = log.slates >= 0
    idx = np.where(valid, log.slates, 0)
    u = np.take_along_axis(u_rows, idx, axis=1)
    v = np.take_along_axis(v_rows, idx, axis=1)
    c = mix(lam_c[:, None], u, v)
    return np.where(valid, c, np.nan), valid


def click_loss(model: EstimatedModel, interactions: InteractionLog) -> float:
    """Exact hinge loss of the click data under the fitted model."""
    log = interactions
    if len(log) == 0:
        return 0.0
    c_all = model.choice_scores()[log.user]
    c, valid = _round_scores(log, c_all, c_all, np.ones(len(log)))
    outside = log.chosen == OUTSIDE
    is_chosen = valid & (log.slates == log.chosen[:, None])
    chosen_score = np.where(outside, model.mu, np.nansum(np.where(is_chosen, c, 0.0), axis=1))
    competitor = valid & ~is_chosen
    slate_part = np.where(competitor, np.maximum(0.0, np.where(valid, c, 0.0) - chosen_score[:, None]), 0.0)
    outside_part = np.where(outside, 0.0, np.maximum(0.0, model.mu - chosen_score))
    return float(slate_part.sum() + outside_part.sum())


def total_loss(model: EstimatedModel, dataset: Dataset, config: TrainConfig) -> float:
    return (config.alpha * rating_loss(model, dataset.ratings(), model.f_rating)
            + config.beta * click_loss(model, dataset.interactions))


def choice_probability(model: EstimatedModel, user: int, item: int) -> float:
    return model.choice_probability(user, item)


def recover_scores(model: EstimatedModel, user: int, item: int) -> tuple:
    return model.recover_scores(user, item)


# ---------------------------------------------------------------------------
# training objective


def _softplus(z, tau):
    return tau * np.logaddexp(0.0, z / tau)


def _scatter(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets by ``index``."""
    out = np.zeros((n,) + values.shape[1:])
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n)
    for col in range(values.shape[1]):
        out[:, col] = np.bincount(index, weights=values[:, col], minlength=n)
    return out


class Objective:
    """Smooth training objective with analytic gradients.

    Raw parameters: ``a``/``b`` free components (users x d-1), ``x``/``y``
    (items x d), ``t_f``/``t_c`` (users), ``mu`` (scalar). The first
    components of ``a`` and ``b`` are the constant 1.
    """

    names = ("a", "b", "x", "y", "t_f", "t_c", "mu")

    def __init__(self, dataset: Dataset, config: TrainConfig, f_rating: RatingMap, temperature: float):
        self.data = dataset
        self.config = config
        self.f_rating = f_rating
        self.tau = temperature
        log = dataset.interactions
        self.r_user = dataset.rating_user
        self.r_item = dataset.rating_item
        self.r_value = dataset.rating_value
        self.c_user = log.user
        self.c_slates = log.slates
        self.c_chosen = log.chosen

    # constrained views
    def lambdas(self, p):
        if self.config.freeze_lambda_f is not None:
            lam_f = np.full_like(p["t_f"], self.config.freeze_lambda_f)
            dlf = np.zeros_like(lam_f)
        else:
            lam_f = expit(p["t_f"])
            dlf = lam_f * (1.0 - lam_f)
        s = expit(p["t_c"])
        return lam_f, dlf, lam_f * s, s

    @staticmethod
    def full(free):
        return np.concatenate((np.ones((free.shape[0], 1)), free), axis=1)

    def _hinge(self, z):
        if self.tau > 0:
            return _softplus(z, self.tau), expit(z / self.tau)
        return np.maximum(z, 0.0), (z > 0).astype(float)

    def value_and_grad(self, p, rating_idx=None, round_idx=None, scale_r=1.0, scale_c=1.0):
        cfg = self.config
        m, n = self.data.n_users, self.data.n_items
        A, B = self.full(p["a"]), self.full(p["b"])
        X, Y = p["x"], p["y"]
        lam_f, dlf, lam_c, s = self.lambdas(p)
        g = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in p.items()}
        gA = np.zeros_like(A)
        gB = np.zeros_like(B)
        # dL/d lambda_f and dL/d lambda_c per user, chained to t_f, t_c at the end
        g_lf = np.zeros(m)
        g_lc = np.zeros(m)
        loss = 0.0

        if cfg.alpha > 0 and self.r_value.size:
            sel = slice(None) if rating_idx is None else rating_idx
            j, i, r = self.r_user[sel], self.r_item[sel], self.r_value[sel]
            u = np.einsum("kd,kd->k", A[j], X[i])
            v = np.einsum("kd,kd->k", B[j], Y[i])
            F = mix(lam_f[j], u, v)
            res = r - self.f_rating(F)
            w = cfg.alpha * scale_r
            loss += w * float(res @ res)
            gF = -2.0 * w * res * self.f_rating.derivative(F)
            gu = gF * lam_f[j]
            gv = gF * (1.0 - lam_f[j])
            gA += _scatter(j, gu[:, None] * X[i], m)
            gB += _scatter(j, gv[:, None] * Y[i], m)
            g["x"] += _scatter(i, gu[:, None] * A[j], n)
            g["y"] += _scatter(i, gv[:, None] * B[j], n)
            g_lf += np.bincount(j, weights=gF * (u - v), minlength=m)

        if cfg.beta > 0 and self.c_user.size:
            sel = slice(None) if round_idx is None else round_idx
            j, slates, chosen = self.c_user[sel], self.c_slates[sel], self.c_chosen[sel]
            valid = slates >= 0
            idx = np.where(valid, slates, 0)
            Aj, Bj = A[j], B[j]
            u = np.einsum("rd,rwd->rw", Aj, X[idx])
            v = np.einsum("rd,rwd->rw", Bj, Y[idx])
            c = mix(lam_c[j][:, None], u, v)
            outside = chosen == OUTSIDE
            is_chosen = valid & (slates == chosen[:, None])
            chosen_score = np.where(outside, p["mu"], np.sum(np.where(is_chosen, c, 0.0), axis=1))
            competitor = valid & ~is_chosen
            h, dh = self._hinge(c - chosen_score[:, None])
            h = np.where(competitor, h, 0.0)
            dh = np.where(competitor, dh, 0.0)
            ho, dho = self._hinge(p["mu"] - chosen_score)
            ho = np.where(outside, 0.0, ho)
            dho = np.where(outside, 0.0, dho)
            w = cfg.beta * scale_c
            loss += w * float(h.sum() + ho.sum())
            # gradient wrt each slate entry's score
            gc = w * dh
            back = w * (dh.sum(axis=1) + dho)  # flows into the chosen score, negatively
            gc = gc - np.where(is_chosen, back[:, None], 0.0)
            g["mu"] = g["mu"] + w * float(dho.sum()) - float(back[outside].sum())
            gu = gc * lam_c[j][:, None]
            gv = gc * (1.0 - lam_c[j][:, None])
            gA += _scatter(j, np.einsum("rw,rwd->rd", gu, X[idx]), m)
            gB += _scatter(j, np.einsum("rw,rwd->rd", gv, Y[idx]), m)
            flat = idx[valid]
            g["x"] += _scatter(flat, (gu[..., None] * Aj[:, None, :])[valid], n)
            g["y"] += _scatter(flat, (gv[..., None] * Bj[:, None, :])[valid], n)
            g_lc += np.bincount(j, weights=np.sum(gc * (u - v), axis=1), minlength=m)

        if cfg.l2 > 0:
            for k in ("a", "b", "x", "y"):
                loss += cfg.l2 * float(np.sum(p[k] ** 2))
                g[k] += 2.0 * cfg.l2 * p[k]
            # x[:, 0], y[:, 0] carry the universal scale; leave them unpenalised
            for k in ("x", "y"):
                loss -= cfg.l2 * float(np.sum(p[k][:, 0] ** 2))
                g[k][:, 0] -= 2.0 * cfg.l2 * p[k][:, 0]

        g["a"] += gA[:, 1:]
        g["b"] += gB[:, 1:]
        # lambda_c = lambda_f * sigmoid(t_c)
        g["t_f"] += (g_lf + g_lc * s) * dlf
        g["t_c"] += g_lc * lam_f * s * (1.0 - s)
        return loss, g


def _flatten(p: dict) -> np.ndarray:
    return np.concatenate([np.ravel(p[k]) for k in Objective.names])


def _unflatten(vec: np.ndarray, like: dict) -> dict:
    out = {}
    pos = 0
    for k in Objective.names:
        shape = np.shape(like[k])
        size = int(np.prod(shape)) if shape else 1
        chunk = vec[pos:pos + size]
        out[k] = chunk.reshape(shape) if shape else float(chunk[0])
        pos += size
    return out


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()}
        self.v = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, frozen=()) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, gk in grads.items():
            if k in frozen:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * gk
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * gk * gk
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if np.ndim(params[k]) == 0:
                params[k] = float(params[k] - update)
            else:
                params[k] -= update


# ---------------------------------------------------------------------------
# outside-score distribution


def _slate_max(log: InteractionLog, c: np.ndarray) -> np.ndarray:
    scores, valid = _round_scores(log, c[log.user], c[log.user], np.ones(len(log)))
    return np.where(valid.any(axis=1), np.nanmax(np.where(valid, scores, -np.inf), axis=1), -np.inf)


def fit_outside_distribution(log: InteractionLog, c_hat: np.ndarray, method: str = "censored_mle",
                             mu: Optional[float] = None) -> tuple:
    """Estimate ``(mu, sigma)`` of outside choice scores given fitted choice scores.

    ``censored_mle``: every round brackets the unseen outside score. When the
    outside option was taken it scored above every slate item; when an item
    was taken it scored below that item. The normal likelihood of these
    one-sided observations is maximised over ``(mu, log sigma)``.

    ``threshold_std``: ``mu`` as given, ``sigma`` is the standard deviation of
    the best slate score over rounds where the outside option was taken.
    """
    outside = log.chosen == OUTSIDE
    best = _slate_max(log, c_hat)
    if method == "threshold_std":
        thresholds = best[outside & np.isfinite(best)]
        sigma = float(np.std(thresholds)) if thresholds.size > 1 else 1.0
        return (float(np.mean(thresholds)) if mu is None else float(mu)), max(sigma, 1e-6)

    lower = best[outside & np.isfinite(best)]  # outside score > lower
    rows = np.flatnonzero(~outside)
    chosen_c = c_hat[log.user[rows], log.chosen[rows]]  # outside score <= chosen_c
    if lower.size == 0 and chosen_c.size == 0:
        return (0.0 if mu is None else float(mu)), 1.0
    pooled = np.concatenate((lower, chosen_c))
    start = np.array([float(np.mean(pooled)), math.log(max(float(np.std(pooled)), 1e-3))])

    def nll(theta):
        m_, ls = theta
        sd = math.exp(ls)
        zl = (lower - m_) / sd
        zu = (chosen_c - m_) / sd
        return -(np.sum(log_ndtr(-zl)) + np.sum(log_ndtr(zu)))

    res = minimize(nll, start, method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 4000})
    m_, ls = res.x
    # all-one-sided data has no finite optimum; keep the start point then
    if not np.all(np.isfinite(res.x)) or abs(ls) > 20:
        m_, ls = start
    return float(m_), float(math.exp(ls))


# ---------------------------------------------------------------------------
# fitting


def _score_scale(dataset: Dataset) -> float:
    if dataset.n_ratings > 1:
        sd = float(np.std(dataset.rating_value))
        if sd > 0:
            return sd
    return 1.0


def init_params(dataset: Dataset, config: TrainConfig, rng: np.random.Generator) -> dict:
    m, n, d = dataset.n_users, dataset.n_items, config.latent_dim
    s = config.init_scale
    center = float(np.mean(dataset.rating_value)) if dataset.n_ratings else 0.0
    x = rng.normal(0.0, s, (n, d))
    y = rng.normal(0.0, s, (n, d))
    x[:, 0] += center
    y[:, 0] += center
    lf = config.freeze_lambda_f if config.freeze_lambda_f is not None else config.init_lambda_f
    t_f = math.log(lf / (1.0 - lf)) if lf < 1.0 else 0.0
    ratio = min(config.init_lambda_c / lf, 1.0 - 1e-6)
    t_c = math.log(ratio / (1.0 - ratio))
    params = {
        "a": rng.normal(0.0, s, (m, d - 1)),
        "b": rng.normal(0.0, s, (m, d - 1)),
        "x": x,
        "y": y,
        "t_f": np.full(m, t_f),
        "t_c": np.full(m, t_c),
        "mu": 0.0,
    }
    log = dataset.interactions
    outside = log.chosen == OUTSIDE
    if outside.any():
        A = Objective.full(params["a"])
        B = Objective.full(params["b"])
        lam_f = np.full(m, lf)
        c = mix(lam_f[:, None] * (ratio), A @ x.T, B @ y.T)
        scores, valid = _round_scores(log.select(outside), c[log.user[outside]], c[log.user[outside]],
                                      np.ones(int(outside.sum())))
        if valid.any():
            params["mu"] = float(np.nanmean(scores))
    elif dataset.n_ratings:
        params["mu"] = center
    return params


def _to_model(params: dict, objective: Objective, mu: float, sigma: float,
              expected_outside_enrichment, config: TrainConfig, history: list) -> EstimatedModel:
    lam_f, _, lam_c, _ = objective.lambdas(params)
    return EstimatedModel(
        a_hat=Objective.full(params["a"]), b_hat=Objective.full(params["b"]),
        x_hat=params["x"].copy(), y_hat=params["y"].copy(),
        lambda_f_hat=lam_f, lambda_c_hat=np.minimum(lam_c, lam_f),
        mu=mu, sigma=sigma,
        expected_outside_enrichment=np.asarray(expected_outside_enrichment, dtype=float),
        f_rating=objective.f_rating, config=asdict(config), history=history,
    )


def fit(dataset: Dataset, config: TrainConfig, expected_outside_enrichment=None,
        f_rating: Optional[RatingMap] = None) -> EstimatedModel:
    """Fit user/item factors, lambdas and the outside-score distribution.

    ``expected_outside_enrichment`` (one value per user) is an input, never
    fitted. Training is deterministic given ``config.seed``.
    """
    if dataset.n_rounds == 0 and dataset.n_ratings == 0:
        raise InputError("cannot fit an empty dataset")
    f_rating = f_rating or IdentityRating()
    if expected_outside_enrichment is None:
        expected_outside_enrichment = np.zeros(dataset.n_users)
    rng = np.random.default_rng(config.seed)
    tau = config.temperature
    if tau is None:
        tau = 0.05 * _score_scale(dataset)
    params = init_params(dataset, config, rng)
    objective = Objective(dataset, config, f_rating, tau)
    opt = Adam(params, config.learning_rate)
    frozen = {"t_f"} if config.freeze_lambda_f is not None else set()

    n_r, n_c = dataset.n_ratings, dataset.n_rounds
    n_batches = max(1, math.ceil(max(n_r, n_c) / config.minibatch_size))
    history = []
    best = math.inf
    stale = 0
    for epoch in range(config.epochs):
        r_perm = rng.permutation(n_r)
        c_perm = rng.permutation(n_c)
        r_chunks = np.array_split(r_perm, n_batches)
        c_chunks = np.array_split(c_perm, n_batches)
        epoch_loss = 0.0
        for r_idx, c_idx in zip(r_chunks, c_chunks):
            scale_r = n_r / max(len(r_idx), 1)
            scale_c = n_c / max(len(c_idx), 1)
            loss, grads = objective.value_and_grad(params, r_idx, c_idx, scale_r, scale_c)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(v)) for v in grads.values()):
                raise TrainingError(
                    f"loss became non-finite at epoch {epoch} (last finite epoch loss "
                    f"{history[-1] if history else 'n/a'}, learning_rate={config.learning_rate})"
                )
            opt.step(params, grads, frozen)
            epoch_loss += loss / n_batches
        history.append(epoch_loss)
        if not math.isfinite(best) or epoch_loss < best - config.convergence_tol * max(abs(best), 1.0):
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                # plateau: shrink the step, stop once it is small enough
                if config.lr_decay >= 1.0 or opt.lr * config.lr_decay < config.learning_rate * config.min_lr_fraction:
                    break
                opt.lr *= config.lr_decay
                stale = 0
    _logger.debug("fit stopped after %d epochs, surrogate loss %.6g", len(history), history[-1])

    provisional = _to_model(params, objective, float(params["mu"]), 1.0,
                            expected_outside_enrichment, config, history)
    c_hat = provisional.choice_scores()
    if n_c:
        mu, sigma = fit_outside_distribution(dataset.interactions, c_hat, config.sigma_method,
                                             mu=float(params["mu"]) if config.sigma_method == "threshold_std" else None)
    else:
        mu, sigma = float(params["mu"]), 1.0
    return _to_model(params, objective, mu, sigma, expected_outside_enrichment, config, history)


# ---------------------------------------------------------------------------
# plain rating factorization (ratings-based baseline, sandbox reconstructor)


@dataclass
class RatingFactorization:
    """``r ~ mean + user_bias + item_bias + p_user . q_item`` fitted by squared loss."""

    global_mean: float
    user_bias: np.ndarray
    item_bias: np.ndarray
    P: np.ndarray
    Q: np.ndarray

    def predict(self) -> np.ndarray:
        return self.global_mean + self.user_bias[:, None] + self.item_bias[None, :] + self.P @ self.Q.T

    @classmethod
    def fit(cls, users, items, ratings, n_users: int, n_items: int, latent_dim: int = 3,
            epochs: int = 200, learning_rate: float = 0.05, l2: float = 0.05,
            minibatch_size: int = 512, seed: int = 0, init_scale: float = 0.1) -> "RatingFactorization":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ratings = np.asarray(ratings, dtype=float)
        rng = np.random.default_rng(seed)
        mean = float(ratings.mean()) if ratings.size else 0.0
        p = {
            "bu": np.zeros(n_users),
            "bi": np.zeros(n_items),
            "P": rng.normal(0.0, init_scale, (n_users, latent_dim)),
            "Q": rng.normal(0.0, init_scale, (n_items, latent_dim)),
        }
        if ratings.size == 0:
            return cls(mean, p["bu"], p["bi"], p["P"], p["Q"])
        opt = Adam(p, learning_rate)
        n_batches = max(1, math.ceil(ratings.size / minibatch_size))
        # regularisation is spread over batches so one epoch applies it once
        for _ in range(epochs):
            for idx in np.array_split(rng.permutation(ratings.size), n_batches):
                j, i, r = users[idx], items[idx], ratings[idx]
                pred = mean + p["bu"][j] + p["bi"][i] + np.einsum("kd,kd->k", p["P"][j], p["Q"][i])
                gr = -2.0 * (r - pred)
                g = {
                    "bu": np.bincount(j, weights=gr, minlength=n_users),
                    "bi": np.bincount(i, weights=gr, minlength=n_items),
                    "P": _scatter(j, gr[:, None] * p["Q"][i], n_users),
                    "Q": _scatter(i, gr[:, None] * p["P"][j], n_items),
                }
                for k in p:
                    g[k] += 2.0 * l2 * p[k] / n_batches
                opt.step(p, g)
        return cls(mean, p["bu"], p["bi"], p["P"], p["Q"])


def numerical_gradient(objective: Objective, params: dict, step: float = 1e-5) -> dict:
    """Central finite differences of the full-batch objective (for checks)."""
    base = _flatten(params)
    grad = np.zeros_like(base)
    for k in range(base.size):
        hi = base.copy()
        lo = base.copy()
        hi[k] += step
        lo[k] -= step
        f_hi, _ = objective.value_and_grad(_unflatten(hi, params))
        f_lo, _ = objective.value_and_grad(_unflatten(lo, params))
        grad[k] = (f_hi - f_lo) / (2 * step)
    return _unflatten(grad, params)


__all__: Sequence[str] = (
    "Dataset",
    "EstimatedModel",
    "Objective",
    "RatingFactorization",
    "TrainConfig",
    "choice_probability",
    "click_loss",
    "fit",
    "fit_outside_distribution",
    "numerical_gradient",
    "rating_loss",
    "recover_scores",
    "total_loss",
)
