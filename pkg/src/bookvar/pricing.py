"""Black-Scholes helpers in forward form.

All functions broadcast over numpy arrays. ``forward`` is the carry forward
``S * exp((r - q) * tau)`` and ``discount`` is ``exp(-r * tau)``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

SQRT_2PI = np.sqrt(2.0 * np.pi)


def _d1_d2(forward, strike, tau, vol):
    sd = vol * np.sqrt(tau)
    d1 = (np.log(forward / strike) + 0.5 * sd * sd) / sd
    return d1, d1 - sd


def bs_price(forward, strike, tau, vol, discount, is_call):
    """Undiscounted-forward Black price times the discount factor."""
    forward, strike, tau, vol, discount = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (forward, strike, tau, vol, discount))
    )
    d1, d2 = _d1_d2(forward, strike, tau, vol)
    call = discount * (forward * ndtr(d1) - strike * ndtr(d2))
    put = discount * (strike * ndtr(-d2) - forward * ndtr(-d1))
    return np.where(is_call, call, put)


def bs_delta(forward, strike, tau, vol, div_discount, is_call):
    """Spot delta: ``exp(-q tau) N(d1)`` for calls, minus the complement for puts."""
    d1, _ = _d1_d2(np.asarray(forward, float), np.asarray(strike, float), tau, vol)
    return np.where(is_call, div_discount * ndtr(d1), -div_discount * ndtr(-d1))


def bs_vega(forward, strike, tau, vol, discount):
    """Sensitivity of price to a unit change in volatility (not per vol point)."""
    d1, _ = _d1_d2(np.asarray(forward, float), np.asarray(strike, float), tau, vol)
    pdf = np.exp(-0.5 * d1 * d1) / SQRT_2PI
    return discount * forward * pdf * np.sqrt(tau)
