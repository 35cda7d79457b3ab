import numpy as np
import pytest

from afckf.cubature import NoiseCovariances
from afckf.models import SystemModel

ACCEPTANCE_LINES: list[str] = []


def kalman_step(x, P, F, Q, H, R, z):
    """Textbook linear Kalman filter step (predict + update)."""
    x_pred = F @ x
    P_pred = F @ P @ F.T + Q
    S = H @ P_pred @ H.T + R
    K = P_pred @ H.T @ np.linalg.inv(S)
    x_post = x_pred + K @ (z - H @ x_pred)
    I = np.eye(len(x))
    P_post = (I - K @ H) @ P_pred
    return x_post, P_post, x_pred, P_pred


def scalar_model(a=1.0, c=1.0):
    return SystemModel(n=1, m=1, f=lambda x: a * x, h=lambda x: c * x, ts=1.0)


def simulate_linear(rng, F, H, Q, R, x0, steps):
    n, m = F.shape[0], H.shape[0]
    Lq = np.linalg.cholesky(Q + 1e-300 * np.eye(n)) if np.all(np.linalg.eigvalsh(Q) > 0) else \
        np.linalg.eigh(Q)[1] * np.sqrt(np.clip(np.linalg.eigvalsh(Q), 0, None))
    Lr = np.linalg.cholesky(R)
    xs, zs = [], []
    x = np.asarray(x0, dtype=float)
    for _ in range(steps):
        x = F @ x + Lq @ rng.standard_normal(n)
        xs.append(x)
        zs.append(H @ x + Lr @ rng.standard_normal(m))
    return np.array(xs), np.array(zs)


@pytest.fixture
def scalar_noise():
    return NoiseCovariances(q=np.array([[0.2]]), r=np.array([[1.0]]))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
