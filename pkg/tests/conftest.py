import math

import pytest

from tokencom.channel import ChannelConfig


def scalar_sinr(h, kappa, w, noise_power):
    """Loop-based SINR written without numpy vector algebra, used as an oracle."""
    U, R, N = len(h), len(h[0]), len(h[0][0])
    out = [[0.0] * R for _ in range(U)]
    for i in range(U):
        for l in range(R):
            if not kappa[i][l]:
                continue

            def gain(j):
                acc = 0j
                for n in range(N):
                    acc += complex(h[i][l][n]).conjugate() * complex(w[j][l][n])
                return abs(acc) ** 2

            interf = sum(kappa[j][l] * gain(j) for j in range(U) if j != i)
            out[i][l] = gain(i) / (interf + noise_power)
    return out


def scalar_rates(sinr, kappa, bandwidth):
    per_rb = [[bandwidth * math.log2(1.0 + s) for s in row] for row in sinr]
    totals = [sum(k * r for k, r in zip(krow, rrow)) for krow, rrow in zip(kappa, per_rb)]
    return per_rb, totals


def scalar_powers(w, kappa):
    per_user = []
    total = 0.0
    for i, rows in enumerate(w):
        p = 0.0
        for l, vec in enumerate(rows):
            cell = sum(abs(complex(x)) ** 2 for x in vec)
            total += cell
            p += kappa[i][l] * cell
        per_user.append(p)
    return per_user, total


@pytest.fixture
def tiny_channel():
    return ChannelConfig(num_antennas=2, num_users=2, num_rbs=2, channel_variance=1.0)


def random_instance(rng, U, R, N, scale=1.0):
    h = (rng.standard_normal((U, R, N)) + 1j * rng.standard_normal((U, R, N))) * scale
    kappa = rng.integers(0, 2, size=(U, R))
    w = (rng.standard_normal((U, R, N)) + 1j * rng.standard_normal((U, R, N))) * kappa[..., None]
    return h, kappa, w


# one line per acceptance criterion, printed after the test session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
