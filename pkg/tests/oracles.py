"""Independent reference implementations used to freeze derived test values.

Everything here is deliberately naive: explicit Python loops, math.fsum
accumulation, and mpmath high-precision softmax. Nothing imports from attnreg,
so agreement between the package and these oracles is meaningful evidence
rather than the same code tested against itself.
"""

import math

import mpmath
import numpy as np


def softmax_rows_hp(x, d, dps: int = 50) -> np.ndarray:
    """Row softmax of x / sqrt(d) along the last axis at dps decimal digits,
    rounded to float64 at the very end."""
    arr = np.asarray(x, dtype=np.float64)
    flat = arr.reshape(-1, arr.shape[-1])
    out = np.empty_like(flat)
    with mpmath.workdps(dps):
        scale = 1 / mpmath.sqrt(d)
        for i, row in enumerate(flat):
            exps = [mpmath.exp(mpmath.mpf(float(v)) * scale) for v in row]
            z = mpmath.fsum(exps)
            out[i] = [float(e / z) for e in exps]
    return out.reshape(arr.shape)


def edited_softmax_hp(logits, s_full, d, dps: int = 50) -> np.ndarray:
    """Row softmax of (logits + s_full) / sqrt(d) per head, high precision.

    logits is (H, M, N); s_full is (M, N), shared across heads.
    """
    logits = np.asarray(logits, dtype=np.float64)
    s_full = np.asarray(s_full, dtype=np.float64)
    shifted = logits + s_full[None, :, :]
    return softmax_rows_hp(shifted, d, dps=dps)


def softmax_vjp_bf(a, g) -> np.ndarray:
    """Backward pass of a row softmax, elementwise loops with fsum rows."""
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    fa = a.reshape(-1, a.shape[-1])
    fg = g.reshape(-1, g.shape[-1])
    out = np.empty_like(fa)
    for i in range(fa.shape[0]):
        dot = math.fsum(fg[i, k] * fa[i, k] for k in range(fa.shape[1]))
        for j in range(fa.shape[1]):
            out[i, j] = fa[i, j] * (fg[i, j] - dot)
    return out.reshape(a.shape)


def attention_output_bf(values, v) -> np.ndarray:
    """A @ V per head by triple loop; v is (N, d_v) shared across heads or
    (H, N, d_v) per head."""
    values = np.asarray(values, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    heads, m, n = values.shape
    d_v = v.shape[-1]
    out = np.empty((heads, m, d_v))
    for h in range(heads):
        vh = v if v.ndim == 2 else v[h]
        for i in range(m):
            for j in range(d_v):
                out[h, i, j] = math.fsum(values[h, i, k] * vh[k, j] for k in range(n))
    return out


def gaussian_kernel_bf(x0, y0, sigma, w) -> np.ndarray:
    """Entry (i, j) = exp(-((i - y0)^2 + (j - x0)^2) / (2 sigma^2)), 1-based."""
    out = np.empty((w, w))
    for i in range(1, w + 1):
        for j in range(1, w + 1):
            out[i - 1, j - 1] = math.exp(
                -((i - y0) ** 2 + (j - x0) ** 2) / (2.0 * sigma * sigma)
            )
    return out


def perturbation_bf(theta, sigma, w) -> np.ndarray:
    """Sum over the r x r kernel lattice of theta[p-1, q-1] * kernel(p, q),
    centers at (2 sigma p, 2 sigma q)."""
    theta = np.asarray(theta, dtype=np.float64)
    r = theta.shape[0]
    out = np.empty((w, w))
    terms = np.empty((r, r))
    for i in range(w):
        for j in range(w):
            for p in range(1, r + 1):
                for q in range(1, r + 1):
                    kern = gaussian_kernel_bf(2 * sigma * p, 2 * sigma * q, sigma, w)
                    terms[p - 1, q - 1] = theta[p - 1, q - 1] * kern[i, j]
            out[i, j] = math.fsum(terms.reshape(-1))
    return out


def quantile_bf(values, q):
    """Nearest-rank-lower quantile of a flat list: value at zero-based sorted
    index floor(q * (n - 1)); index is the first original position holding
    that value."""
    vals = [float(v) for v in np.asarray(values).reshape(-1)]
    k = int(math.floor(q * (len(vals) - 1)))
    value = sorted(vals)[k]
    return value, vals.index(value)


def error_E_bf(abar, targets, alpha, mu, q_level, q_target) -> float:
    """Quantile + mass error on a head-averaged (M, N) map, plain loops."""
    abar = np.asarray(abar, dtype=np.float64)
    m = abar.shape[0]
    quant_terms = []
    mass_terms = []
    for t in targets:
        col = [float(v) for v in abar[:, t]]
        qval, _ = quantile_bf(col, q_level)
        quant_terms.append((qval - q_target) ** 2)
        mass_terms.append((math.fsum(col) - mu * m) ** 2)
    inv = 1.0 / len(targets)
    return inv * math.fsum(quant_terms) + alpha * inv * math.fsum(mass_terms)


def total_loss_bf(a_prime, a_orig, targets, alpha, mu, q_level, q_target, beta) -> float:
    """E on the head-averaged edited map plus the smoothed Frobenius penalty
    over all heads, eps = 1e-12 under the square root."""
    a_prime = np.asarray(a_prime, dtype=np.float64)
    a_orig = np.asarray(a_orig, dtype=np.float64)
    heads = a_prime.shape[0]
    abar = np.empty(a_prime.shape[1:])
    for i in range(a_prime.shape[1]):
        for j in range(a_prime.shape[2]):
            abar[i, j] = math.fsum(a_prime[h, i, j] for h in range(heads)) / heads
    e = error_E_bf(abar, targets, alpha, mu, q_level, q_target)
    sq = math.fsum(float(d) ** 2 for d in (a_prime - a_orig).reshape(-1))
    return e + beta * math.sqrt(sq + 1e-12)


def alphas_bar_bf(train_steps, beta_start, beta_end) -> np.ndarray:
    """Cumulative product of (1 - beta_t) over a linear beta schedule."""
    out = np.empty(train_steps)
    prod = 1.0
    for t in range(train_steps):
        beta = beta_start + (beta_end - beta_start) * t / (train_steps - 1)
        prod *= 1.0 - beta
        out[t] = prod
    return out


def time_embedding_bf(timestep, dim=8) -> np.ndarray:
    half = dim // 2
    out = np.empty(dim)
    for i in range(half):
        freq = math.exp(-math.log(10000.0) * i / half)
        out[i] = math.sin(timestep * freq)
        out[half + i] = math.cos(timestep * freq)
    return out


def scaling_bound_bf(token_maxima, dominant_index, tau, kappa_eos, i_p,
                     least_value, eos_value):
    """Closed-form post-edit peak bound: max(tau (I_avg + delta), I_l + k I_eos)
    with I_avg the mean of non-dominant maxima and delta their worst excess
    over I_avg plus i_p."""
    others = [v for i, v in enumerate(token_maxima) if i != dominant_index]
    i_avg = math.fsum(others) / len(others)
    delta = max(v - i_avg for v in others) + i_p
    return max(tau * (i_avg + delta), least_value + kappa_eos * eos_value)
