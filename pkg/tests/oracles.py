"""Closed-form references shared by several test modules."""
import numpy as np

from dcmlab.tensor_core import Tensor


class SingleDatumOracle:
    """Exact eps-prediction when the data distribution is a point mass at ``x0``.

    For x_t = sqrt(a) x0 + sqrt(1 - a) eps the noise is recoverable exactly:
    eps = (x_t - sqrt(a) x0) / sqrt(1 - a).
    """

    def __init__(self, x0: np.ndarray, schedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.schedule = schedule

    def __call__(self, x, t, c=None):
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        a = float(self.schedule.alpha_bar[int(np.asarray(t).reshape(-1)[0])])
        eps = (data - np.sqrt(a) * self.x0) / np.sqrt(1.0 - a)
        return Tensor(eps.astype(data.dtype))


def closed_form_trajectory(x0, x_start, grid):
    """DDIM trajectory from x_start at t_N with the exact single-datum eps, noisiest first.

    The exact eps is constant along a DDIM path for a point mass, so every
    state is sqrt(a_n) x0 + sqrt(1 - a_n) eps_star.
    """
    a_N = grid.alpha_bar(grid.N)
    eps_star = (x_start - np.sqrt(a_N) * x0) / np.sqrt(1.0 - a_N)
    return [np.sqrt(grid.alpha_bar(n)) * x0 + np.sqrt(1.0 - grid.alpha_bar(n)) * eps_star
            for n in range(grid.N, -1, -1)]
