"""Shared test fixtures: analytic toy denoiser and finite-difference tools."""

import math

import numpy as np


class LinearGaussianDenoiser:
    """Closed-form optimal epsilon predictor for z0 ~ N(mean, var * I).

    With z_t = a z0 + s eps (a = sqrt(abar), s = sqrt(1-abar)) the posterior
    mean of z0 is Gaussian-linear in z_t, so the optimal noise prediction
    eps*(z, t) = (z - a E[z0|z]) / s is affine in z. Accepts fractional
    timesteps via the schedule's lambda-interpolated alpha-bar.
    """

    def __init__(self, schedule, mean=0.0, var=1.0):
        self.schedule = schedule
        self.mean = mean
        self.var = var

    def coefficients(self, t):
        ab = self.schedule.abar_continuous(float(t))
        a = math.sqrt(ab)
        s2 = 1.0 - ab
        gain = a * self.var / (a * a * self.var + s2)
        # eps = (z - a*(m + gain*(z - a*m))) / s  ==  A*z + B
        s = math.sqrt(s2)
        A = (1.0 - a * gain) / s
        B = (-a * self.mean + a * gain * a * self.mean) / s
        return A, B

    def __call__(self, z, cond, t):
        A, B = self.coefficients(t)
        return A * z + B


def finite_difference_grads(loss_fn, params, names=None, h=1e-4):
    """Central finite differences of a scalar loss over a params dict."""
    grads = {}
    for name in names if names is not None else params:
        arr = params[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn(params)
            flat[i] = old - h
            lm = loss_fn(params)
            flat[i] = old
            gflat[i] = (lp - lm) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(got, want, floor=1e-8):
    """Max elementwise relative error with an absolute floor for tiny values."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), floor)
    return float(np.max(np.abs(got - want) / denom))
