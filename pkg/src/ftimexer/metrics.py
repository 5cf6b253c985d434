"""Point-forecast error metrics."""
import math
from dataclasses import dataclass

import numpy as np

__all__ = ["Metrics", "compute_metrics", "SS_TOT_FLOOR"]

# Below this total sum of squares R^2 is reported as undefined (None).
SS_TOT_FLOOR = 1e-12


@dataclass(frozen=True)
class Metrics:
    r2: float | None
    mse: float
    rmse: float
    mae: float
    n: int

    def as_row(self):
        return [self.r2, self.mse, self.rmse, self.mae]


def compute_metrics(y, y_hat) -> Metrics:
    """R^2 (against the mean of ``y``), MSE, RMSE and MAE over all entries."""
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} targets vs {y_hat.size} predictions")
    if y.size == 0:
        raise ValueError("cannot score empty arrays")
    resid = y - y_hat
    ss_res = float(np.dot(resid, resid))
    centred = y - y.mean()
    ss_tot = float(np.dot(centred, centred))
    mse = ss_res / y.size
    r2 = None if ss_tot < SS_TOT_FLOOR else 1.0 - ss_res / ss_tot
    return Metrics(r2=r2, mse=mse, rmse=math.sqrt(mse), mae=float(np.mean(np.abs(resid))), n=int(y.size))
