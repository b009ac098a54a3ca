"""Multi-image deconvolution from a sparse focal stack.

Recovers a single sharp frame x from slices y_k by minimizing

    0.5 * sum_k ||A_k x - y_k||^2  +  lam * R(x)

where A_k is the forward blur of slice k.  R is selectable: isotropic
total variation (proximal step solved with a projected dual iteration),
a quadratic penalty (folded into the smooth part), or nothing.  The
smooth part is driven by FISTA with adaptive restart and a step-halving
safeguard, so the reported loss trace is monotone.

A fourth mode runs plug-and-play half-quadratic splitting: gradient
steps on the data term alternate with calls to an external denoiser
process speaking a one-request-one-reply protocol on stdin/stdout::

    client -> denoiser:  b"DENOISE sigma=<float>\\n" + one PFM image
    denoiser -> client:  one PFM image of the same size

The denoiser runs for the whole solve; misbehavior (exit, malformed or
wrong-sized replies, hangs) surfaces as typed DenoiserError subclasses,
never as a crash or a stall.
"""

import math
import shlex
import subprocess
import threading
from dataclasses import dataclass

import numpy as np

from ._config import mapping_kwargs
from .imgio import decode_pfm, encode_pfm, validate_image
from .seidelconv import lipschitz_estimate

PRIORS = ("tv", "l2", "none", "pnp")

TV_PROX_ITERS = 20


class DenoiserError(RuntimeError):
    """External denoiser failed (base class for all denoiser trouble)."""


class DenoiserTimeout(DenoiserError):
    """External denoiser did not reply in time."""


class DenoiserProtocolError(DenoiserError):
    """External denoiser replied with something other than a valid image."""


@dataclass
class SolveConfig:
    prior: str = "tv"
    lam: float = 2e-3                # prior weight (unused by pnp)
    iters: int = 150
    step: float = 0.0                # 0 -> 0.9 / estimated Lipschitz bound
    init: str = "stack_average"      # or "zeros"
    sigma_max: float = 5e-2          # pnp noise schedule, start
    sigma_min: float = 1e-3          # pnp noise schedule, end
    data_steps: int = 5              # pnp gradient steps per denoiser call
    denoiser_cmd: str = ""
    denoiser_timeout: float = 30.0

    def __post_init__(self):
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        if self.iters < 1:
            raise ValueError("need at least one iteration")
        if self.lam < 0:
            raise ValueError("prior weight must be nonnegative")
        if self.init not in ("stack_average", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.prior == "pnp":
            if not (0 < self.sigma_min <= self.sigma_max):
                raise ValueError("need 0 < sigma_min <= sigma_max")
            if self.data_steps < 1:
                raise ValueError("data_steps must be positive")

    @classmethod
    def from_mapping(cls, mapping):
        return cls(**mapping_kwargs(cls, mapping, "solver option"))


# --------------------------------------------------------------------------
# total variation pieces


def _tv_grad(x):
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[:, :-1] = x[:, 1:] - x[:, :-1]
    gy[:-1, :] = x[1:, :] - x[:-1, :]
    return gx, gy


def _tv_div(px, py):
    # negative adjoint of _tv_grad: <grad u, p> == -<u, div p>
    d = np.zeros_like(px)
    d[:, 0] += px[:, 0]
    d[:, 1:-1] += px[:, 1:-1] - px[:, :-2]
    d[:, -1] += -px[:, -2]
    d[0, :] += py[0, :]
    d[1:-1, :] += py[1:-1, :] - py[:-2, :]
    d[-1, :] += -py[-2, :]
    return d


def tv_value(x):
    gx, gy = _tv_grad(x)
    return float(np.sqrt(gx * gx + gy * gy).sum())


def tv_prox(b, mu, iters=TV_PROX_ITERS):
    """Proximal map of mu * TV at b, via projected gradient on the dual.

    The dual field s (one 2-vector per pixel, |s| <= mu) is updated with
    step 1/8 -- the scaled form of the classic projection algorithm, so
    no division by mu appears anywhere.  The primal is x = b + div s.
    """
    if mu <= 0:
        return b.copy()
    sx = np.zeros_like(b)
    sy = np.zeros_like(b)
    for _ in range(iters):
        gx, gy = _tv_grad(_tv_div(sx, sy) + b)
        sx += 0.125 * gx
        sy += 0.125 * gy
        norm = np.sqrt(sx * sx + sy * sy)
        scale = mu / np.maximum(norm, mu)
        sx *= scale
        sy *= scale
    return b + _tv_div(sx, sy)


# --------------------------------------------------------------------------
# external denoiser client


class DenoiserClient:
    """Talks the stdin/stdout protocol to a persistent denoiser process."""

    def __init__(self, cmd, timeout=30.0):
        argv = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
        if not argv:
            raise ValueError("empty denoiser command")
        self.timeout = float(timeout)
        self._argv = argv
        try:
            self._proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL)
        except OSError as exc:
            raise DenoiserError(f"cannot start denoiser {argv[0]!r}: {exc}") from exc

    def denoise(self, img, sigma):
        img = validate_image(img)
        proc = self._proc
        if proc.poll() is not None:
            raise DenoiserError(
                f"denoiser exited with code {proc.returncode}")
        request = (f"DENOISE sigma={float(sigma):.17g}\n".encode("ascii")
                   + encode_pfm(img))
        box = {}

        def talk():
            try:
                proc.stdin.write(request)
                proc.stdin.flush()
                box["reply"] = decode_pfm(proc.stdout)
            except Exception as exc:       # classified below
                box["error"] = exc

        worker = threading.Thread(target=talk, daemon=True)
        worker.start()
        worker.join(self.timeout)
        if worker.is_alive():
            proc.kill()
            raise DenoiserTimeout(
                f"denoiser gave no reply within {self.timeout:g}s")
        if "error" in box:
            exc = box["error"]
            try:
                rc = proc.wait(timeout=0.5)
            except subprocess.TimeoutExpired:
                rc = None
            if rc is not None:
                raise DenoiserError(
                    f"denoiser exited with code {rc} before replying") from exc
            if isinstance(exc, (BrokenPipeError, OSError)):
                raise DenoiserError(f"denoiser pipe failed: {exc}") from exc
            raise DenoiserProtocolError(f"bad denoiser reply: {exc}") from exc
        reply = box["reply"]
        if reply.shape != img.shape:
            raise DenoiserProtocolError(
                f"denoiser returned {reply.shape[0]}x{reply.shape[1]}, "
                f"expected {img.shape[0]}x{img.shape[1]}")
        return reply

    def close(self):
        proc = self._proc
        if proc.poll() is None:
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=1.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
        return False


# --------------------------------------------------------------------------
# solver


def _check_pair(operator, stack):
    if operator.n_slices != stack.n_slices:
        raise ValueError(f"operator has {operator.n_slices} slices but the "
                         f"stack has {stack.n_slices}")
    if tuple(operator.frame_shape) != tuple(stack.shape):
        raise ValueError(f"operator frame {operator.frame_shape} does not "
                         f"match stack frame {stack.shape}")


def _initial(stack, how):
    if how == "zeros":
        return np.zeros(stack.shape)
    return stack.data.mean(axis=0)


def deconvolve(operator, stack, config=None, callback=None, denoiser=None):
    """Solve for the sharp frame behind a focal stack.

    ``operator`` provides forward(img, k) / adjoint(res, k) plus
    n_slices and frame_shape.  Returns (image, info); info carries the
    monotone loss trace, the step size, restart count and the Lipschitz
    bound used.  For the pnp prior an already-running DenoiserClient may
    be passed; otherwise one is started from config.denoiser_cmd.
    """
    cfg = config or SolveConfig()
    _check_pair(operator, stack)
    ys = [stack.slice(k) for k in range(stack.n_slices)]
    lip = lipschitz_estimate(operator)
    if cfg.prior == "l2":
        lip += 2.0 * cfg.lam
    step = cfg.step if cfg.step > 0 else 0.9 / max(lip, 1e-12)

    if cfg.prior == "pnp":
        return _solve_pnp(operator, stack, ys, cfg, step, lip, denoiser,
                          callback)

    lam = cfg.lam

    def smooth_grad(x):
        g = np.zeros_like(x)
        val = 0.0
        for k, y in enumerate(ys):
            r = operator.forward(x, k) - y
            val += 0.5 * float((r * r).sum())
            g += operator.adjoint(r, k)
        if cfg.prior == "l2":
            val += lam * float((x * x).sum())
            g += 2.0 * lam * x
        return g, val

    def smooth_value(x):
        val = 0.0
        for k, y in enumerate(ys):
            r = operator.forward(x, k) - y
            val += 0.5 * float((r * r).sum())
        if cfg.prior == "l2":
            val += lam * float((x * x).sum())
        return val

    def prox(z, s):
        if cfg.prior == "tv" and lam > 0:
            return tv_prox(z, s * lam)
        return z

    def full_value(x):
        val = smooth_value(x)
        if cfg.prior == "tv" and lam > 0:
            val += lam * tv_value(x)
        return val

    x = _initial(stack, cfg.init)
    v = x
    t = 1.0
    prev = full_value(x)
    losses = []
    restarts = 0
    for i in range(cfg.iters):
        g, _ = smooth_grad(v)
        cand = prox(v - step * g, step)
        val = full_value(cand)
        slack = abs(prev) * 1e-12 + 1e-15
        if val > prev + slack and t > 1.0:
            # momentum overshot: drop it and retry from the last iterate
            restarts += 1
            t = 1.0
            v = x
            g, _ = smooth_grad(v)
            cand = prox(v - step * g, step)
            val = full_value(cand)
        halvings = 0
        while val > prev + slack and halvings < 20:
            step *= 0.5
            cand = prox(v - step * g, step)
            val = full_value(cand)
            halvings += 1
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        v = cand + ((t - 1.0) / t_next) * (cand - x)
        x = cand
        t = t_next
        prev = val
        losses.append(val)
        if callback is not None:
            callback(i, x, val)
    info = {"loss": losses, "step": step, "lipschitz": lip,
            "restarts": restarts, "iters": cfg.iters, "prior": cfg.prior}
    return x, info


def _solve_pnp(operator, stack, ys, cfg, step, lip, denoiser, callback):
    own_client = denoiser is None
    if own_client:
        if not cfg.denoiser_cmd:
            raise ValueError("pnp prior needs denoiser_cmd")
        denoiser = DenoiserClient(cfg.denoiser_cmd, cfg.denoiser_timeout)
    x = _initial(stack, cfg.init)
    sigmas = np.geomspace(cfg.sigma_max, cfg.sigma_min, cfg.iters)
    losses = []
    try:
        for i, sigma in enumerate(sigmas):
            val = 0.0
            for _ in range(cfg.data_steps):
                g = np.zeros_like(x)
                val = 0.0
                for k, y in enumerate(ys):
                    r = operator.forward(x, k) - y
                    val += 0.5 * float((r * r).sum())
                    g += operator.adjoint(r, k)
                x = x - step * g
            x = denoiser.denoise(x, sigma)
            losses.append(val)
            if callback is not None:
                callback(i, x, val)
    finally:
        if own_client:
            denoiser.close()
    info = {"loss": losses, "step": step, "lipschitz": lip, "restarts": 0,
            "iters": cfg.iters, "prior": "pnp",
            "sigmas": [float(s) for s in sigmas]}
    return x, info
