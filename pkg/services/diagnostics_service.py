"""
Convergence diagnostics: rank-normalised split R-hat and bulk/tail ESS.
"""

from typing import Any, Dict, Literal, Optional

import numpy as np
import pandas as pd
from loguru import logger
from scipy.stats import norm, rankdata

from models.domain import PosteriorDraws
from models.errors import DegenerateInput
from services.parameter_transforms import ParamLayout, batch_to_rows, constrained_draws

RHAT_WARNING = 1.05


def _validate(chains: np.ndarray, min_chains: int) -> np.ndarray:
    chains = np.asarray(chains, dtype=np.float64)
    if chains.ndim == 1:
        chains = chains[None, :]
    if chains.ndim != 2:
        raise DegenerateInput(f"Expected a (chains, draws) array, got shape {chains.shape}")
    if chains.shape[0] < min_chains or chains.shape[1] < 4:
        raise DegenerateInput(
            f"Need at least {min_chains} chains with 4 draws each, got {chains.shape[0]} x {chains.shape[1]}"
        )
    return chains


def _is_constant(chains: np.ndarray) -> bool:
    return bool(np.all(chains == chains.flat[0]))


def split_chains(chains: np.ndarray) -> np.ndarray:
    half = chains.shape[1] // 2
    return np.concatenate([chains[:, :half], chains[:, -half:]], axis=0)


def rank_normalize(chains: np.ndarray) -> np.ndarray:
    ranks = rankdata(chains, method="average").reshape(chains.shape)
    return norm.ppf((ranks - 0.375) / (chains.size + 0.25))


def _basic_rhat(chains: np.ndarray) -> float:
    n_draws = chains.shape[1]
    within = chains.var(axis=1, ddof=1).mean()
    between = n_draws * chains.mean(axis=1).var(ddof=1)
    if within == 0:
        return np.inf if between > 0 else np.nan
    var_hat = (n_draws - 1) / n_draws * within + between / n_draws
    return float(np.sqrt(var_hat / within))


def rhat(chains: np.ndarray, warn: bool = True) -> float:
    """
    Rank-normalised split R-hat: the larger of the bulk and folded values.

    Returns ``nan`` for constant input and ``inf`` when every chain is constant
    but chains disagree.
    """
    chains = _validate(chains, min_chains=2)
    if _is_constant(chains):
        if warn:
            logger.warning("R-hat undefined for constant draws")
        return np.nan
    if np.all(chains.var(axis=1) == 0):
        if warn:
            logger.warning("Every chain is constant at a different value; R-hat is infinite")
        return np.inf
    split = split_chains(chains)
    bulk = _basic_rhat(rank_normalize(split))
    folded = np.abs(chains - np.median(chains))
    tail = _basic_rhat(rank_normalize(split_chains(folded)))
    return float(np.nanmax([bulk, tail]))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[-1]
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    centered = x - x.mean(axis=-1, keepdims=True)
    spectrum = np.fft.rfft(centered, n=size, axis=-1)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), n=size, axis=-1)[..., :n]
    return acov / n


def _ess(chains: np.ndarray) -> float:
    n_chains, n_draws = chains.shape
    acov = _autocovariance(chains)
    chain_mean = chains.mean(axis=1)
    mean_var = acov[:, 0].mean() * n_draws / (n_draws - 1.0)
    var_plus = mean_var * (n_draws - 1.0) / n_draws
    if n_chains > 1:
        var_plus += chain_mean.var(ddof=1)
    if var_plus == 0:
        return np.nan

    rho_hat = np.zeros(n_draws)
    rho_hat[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho_hat[1] = rho_odd

    # Geyer's initial positive sequence
    t = 1
    while t < n_draws - 3 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_even + rho_odd >= 0:
            rho_hat[t + 1] = rho_even
            rho_hat[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho_hat[max_t + 1] = rho_even

    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t]:
            rho_hat[t + 1] = (rho_hat[t - 1] + rho_hat[t]) / 2.0
            rho_hat[t + 2] = rho_hat[t + 1]
        t += 2

    total = n_chains * n_draws
    tau = -1.0 + 2.0 * rho_hat[: max_t + 1].sum() + rho_hat[max_t + 1: max_t + 2].sum()
    tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def ess(chains: np.ndarray, kind: Literal["bulk", "tail"] = "bulk", warn: bool = True) -> float:
    """
    Effective sample size of one scalar.

    ``bulk`` uses rank-normalised split chains; ``tail`` is the smaller ESS of
    the 5% and 95% quantile indicators. Constant input returns ``nan``.
    """
    chains = _validate(chains, min_chains=1)
    if _is_constant(chains):
        if warn:
            logger.warning("ESS undefined for constant draws")
        return np.nan
    if kind == "bulk":
        return _ess(split_chains(rank_normalize(chains)))
    if kind != "tail":
        raise DegenerateInput(f"Unknown ESS kind '{kind}'")
    values = []
    for prob in (0.05, 0.95):
        indicator = (chains <= np.quantile(chains, prob)).astype(np.float64)
        if _is_constant(indicator):
            values.append(np.nan)
        else:
            values.append(_ess(split_chains(indicator)))
    return float(np.nanmin(values)) if not np.all(np.isnan(values)) else np.nan


def summarize_draws(draws: PosteriorDraws, layout: ParamLayout, rows: Optional[np.ndarray] = None) -> pd.DataFrame:
    """
    Table ``param,mean,sd,q2.5,q97.5,ess_bulk,ess_tail,rhat`` over every
    constrained scalar plus ``lp__``.
    """
    if rows is None:
        rows = batch_to_rows(constrained_draws(draws, layout))
    names = layout.constrained_names() + ["lp__"]
    values = np.column_stack([rows, draws.lp.reshape(-1)])
    n_chains, n_draws = draws.n_chains, draws.n_draws

    records = []
    for column, name in enumerate(names):
        flat = values[:, column]
        chains = flat.reshape(n_chains, n_draws)
        record = {
            "param": name,
            "mean": flat.mean(),
            "sd": flat.std(ddof=1) if flat.size > 1 else 0.0,
            "q2.5": np.quantile(flat, 0.025),
            "q97.5": np.quantile(flat, 0.975),
            "ess_bulk": np.nan,
            "ess_tail": np.nan,
            "rhat": np.nan,
        }
        if n_draws >= 4 and not _is_constant(chains):
            record["ess_bulk"] = ess(chains, "bulk", warn=False)
            record["ess_tail"] = ess(chains, "tail", warn=False)
            if n_chains >= 2:
                record["rhat"] = rhat(chains, warn=False)
        records.append(record)

    summary = pd.DataFrame.from_records(records, columns=["param", "mean", "sd", "q2.5", "q97.5", "ess_bulk", "ess_tail", "rhat"])
    worst = summary["rhat"].max(skipna=True)
    if np.isfinite(worst):
        logger.info(f"Largest R-hat {worst:.4f}, smallest bulk ESS {summary['ess_bulk'].min(skipna=True):.0f}")
    return summary


class DiagnosticsService:
    def __init__(self, rhat_warning: float = RHAT_WARNING):
        self.rhat_warning = rhat_warning

    def summarize(self, draws: PosteriorDraws, layout: ParamLayout, rows: Optional[np.ndarray] = None) -> pd.DataFrame:
        return summarize_draws(draws, layout, rows)

    def check(self, summary: pd.DataFrame, draws: PosteriorDraws) -> Dict[str, Any]:
        """Warn on unmixed chains and post-warmup divergences; returns the worst R-hat and the divergence count."""
        worst = float(summary["rhat"].max(skipna=True))
        if np.isfinite(worst) and worst > self.rhat_warning:
            logger.warning(f"R-hat up to {worst:.3f}; chains have not mixed")
        divergences = int(draws.divergent.sum())
        if divergences:
            logger.warning(f"{divergences} divergent transitions after warm-up")
        return {"max_rhat": worst, "divergences": divergences}


# Global diagnostics service instance
diagnostics_service = DiagnosticsService()
