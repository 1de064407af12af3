"""Diffusion-style guidance: noise schedule, image noising, the sampled
image-space gradient w_s(t) * (eps_hat - eps), built-in oracle denoisers, and
a TCP client for external denoisers.

The guidance never differentiates through the denoiser; it supplies an
image-space gradient the trainer chains through the renderer's reverse pass.
"""

from __future__ import annotations

import socket
from dataclasses import dataclass, field

import numpy as np

from . import wire


class GuidanceError(RuntimeError):
    """Denoiser failure, with request context attached."""


class GuidanceTimeout(GuidanceError):
    pass


@dataclass
class DiffusionSchedule:
    """Discrete variance-preserving schedule: z_t = sqrt(abar_t) u +
    sqrt(1 - abar_t) eps, with SDS weighting w_s(t) = 1 - abar_t."""

    alpha_bar: np.ndarray
    t_min_frac: float = 0.02
    t_max_frac: float = 0.98

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        ab = self.alpha_bar
        if ab.ndim != 1 or len(ab) < 2:
            raise ValueError("alpha_bar must be a 1-D array of length >= 2")
        if (np.diff(ab) > 1e-12).any():
            raise ValueError("alpha_bar must be non-increasing")
        if (ab <= 0).any() or (ab >= 1).any():
            raise ValueError("alpha_bar values must lie in (0, 1)")
        if not 0 <= self.t_min_frac < self.t_max_frac <= 1:
            raise ValueError("invalid t sampling range")

    @classmethod
    def cosine(cls, num_steps: int = 1000, s: float = 0.008,
               t_min_frac: float = 0.02, t_max_frac: float = 0.98) -> "DiffusionSchedule":
        t = np.arange(num_steps + 1) / num_steps
        f = np.cos((t + s) / (1.0 + s) * np.pi / 2.0) ** 2
        ab = np.clip(f / f[0], 1e-6, 1.0 - 1e-6)
        ab = np.minimum.accumulate(ab)
        return cls(alpha_bar=ab, t_min_frac=t_min_frac, t_max_frac=t_max_frac)

    @property
    def num_steps(self) -> int:
        return len(self.alpha_bar) - 1

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_steps}]")
        return t

    def signal(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[self.check_t(t)]))

    def noise(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[self.check_t(t)]))

    def weight(self, t: int) -> float:
        return float(1.0 - self.alpha_bar[self.check_t(t)])

    def sample_t(self, rng: np.random.Generator) -> int:
        lo = int(np.ceil(self.t_min_frac * self.num_steps))
        hi = int(np.floor(self.t_max_frac * self.num_steps))
        return int(rng.integers(lo, hi + 1))


def noise_image(u: np.ndarray, t: int, eps: np.ndarray,
                schedule: DiffusionSchedule) -> np.ndarray:
    """Forward-process sample z_t = sqrt(abar) u + sqrt(1-abar) eps."""
    if eps.shape != u.shape:
        raise ValueError("noise must match the image shape")
    return schedule.signal(t) * u + schedule.noise(t) * eps


class AnalyticGaussianDenoiser:
    """Exact optimal noise predictor for a Gaussian data distribution
    N(mu, sigma_d^2 I) under the schedule's noising convention:

        eps_hat(z, t) = sqrt(1-abar) * (z - sqrt(abar) mu) / (abar sigma_d^2 + 1 - abar)

    which for sigma_d = 0 reduces to (z - sqrt(abar) mu) / sqrt(1-abar).
    """

    def __init__(self, mu: np.ndarray, sigma_d: float, schedule: DiffusionSchedule):
        if sigma_d < 0:
            raise ValueError("sigma_d must be >= 0")
        self.mu = np.asarray(mu, dtype=np.float64)
        self.sigma_d = float(sigma_d)
        self.schedule = schedule

    def __call__(self, z_t: np.ndarray, t: int, prompt: str = "", scale: float = 1.0):
        ab = self.schedule.alpha_bar[self.schedule.check_t(t)]
        var = ab * self.sigma_d ** 2 + (1.0 - ab)
        return np.sqrt(1.0 - ab) * (z_t - np.sqrt(ab) * self.mu) / var


def analytic_gaussian_denoiser(mu, sigma_d: float = 0.0,
                               schedule: DiffusionSchedule | None = None):
    return AnalyticGaussianDenoiser(mu, sigma_d, schedule or DiffusionSchedule.cosine())


def sds_gradient(u: np.ndarray, denoiser, prompt: str, rng: np.random.Generator,
                 schedule: DiffusionSchedule, n_samples: int = 1,
                 guidance_scale: float = 30.0):
    """Image-space guidance gradient averaged over (t, eps) draws:
    E[w_s(t) (eps_hat(z_t; prompt, t) - eps)]. The denoiser is opaque; its
    Jacobian is never taken. Returns (gradient, diagnostics)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    grad = np.zeros(u.shape, dtype=np.float64)
    ts = []
    for _ in range(n_samples):
        t = schedule.sample_t(rng)
        eps = rng.standard_normal(u.shape)
        z_t = noise_image(np.asarray(u, dtype=np.float64), t, eps, schedule)
        try:
            eps_hat = denoiser(z_t, t, prompt, guidance_scale)
        except GuidanceError:
            raise
        except Exception as e:
            raise GuidanceError(f"denoiser failed at t={t} prompt={prompt!r}: {e}") from e
        if np.asarray(eps_hat).shape != u.shape:
            raise GuidanceError(
                f"denoiser returned shape {np.asarray(eps_hat).shape}, expected {u.shape}")
        grad += schedule.weight(t) * (np.asarray(eps_hat, dtype=np.float64) - eps)
        ts.append(t)
    grad /= n_samples
    return grad, {"timesteps": ts}


class SDSGuidance:
    """Trainer-facing wrapper: one denoiser call per step on the full image."""

    requires_full_image = True

    def __init__(self, denoiser, schedule: DiffusionSchedule | None = None,
                 n_samples: int = 1, guidance_scale: float = 30.0):
        self.denoiser = denoiser
        self.schedule = schedule or DiffusionSchedule.cosine()
        self.n_samples = n_samples
        self.guidance_scale = guidance_scale

    def image_gradient(self, u: np.ndarray, rng: np.random.Generator, prompt: str = ""):
        return sds_gradient(u, self.denoiser, prompt, rng, self.schedule,
                            self.n_samples, self.guidance_scale)


class PhotometricGuidance:
    """Reconstruction stand-in: gradient u - target (mean-squared-error
    gradient), bypassing the schedule entirely."""

    requires_full_image = False

    def __init__(self, target: np.ndarray):
        target = np.asarray(target, dtype=np.float64)
        if target.min() < 0 or target.max() > 1:
            raise ValueError("target must lie in [0, 1]")
        self.target = target

    def image_gradient(self, u: np.ndarray, rng=None, prompt: str = ""):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != self.target.shape:
            raise ValueError(f"image shape {u.shape} != target {self.target.shape}")
        return u - self.target, {}


class RemoteDenoiser:
    """Blocking TCP client for the framed denoiser protocol. Transport
    failures are retried idempotently up to `retries` times; timeouts,
    malformed responses and version mismatches are fatal for the step."""

    def __init__(self, host: str, port: int = wire.DEFAULT_PORT,
                 timeout: float = 60.0, retries: int = 3):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.retries = retries

    def _round_trip(self, frame: bytes):
        with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
            sock.sendall(frame)
            return wire.read_frame(sock)

    def __call__(self, z_t: np.ndarray, t: int, prompt: str = "", scale: float = 1.0):
        header = wire.request_header(t, prompt, scale, z_t.shape)
        frame = wire.encode_frame(header, wire.payload_from_array(z_t))
        last_transport_error = None
        for _ in range(1 + self.retries):
            try:
                resp, payload = self._round_trip(frame)
                break
            except socket.timeout as e:
                raise GuidanceTimeout(
                    f"denoiser at {self.host}:{self.port} timed out after {self.timeout}s") from e
            except wire.WireVersionError as e:
                raise GuidanceError(f"protocol version mismatch: {e}") from e
            except wire.WireError as e:
                raise GuidanceError(f"malformed response: {e}") from e
            except OSError as e:
                last_transport_error = e
        else:
            raise GuidanceError(
                f"denoiser at {self.host}:{self.port} unreachable: {last_transport_error}")
        if resp.get("status") != "ok":
            raise GuidanceError(f"denoiser error: {resp.get('message', 'unknown')}")
        if list(resp.get("shape", [])) != list(z_t.shape):
            raise GuidanceError(f"response shape {resp.get('shape')} != request {list(z_t.shape)}")
        return wire.array_from_payload(payload, resp["shape"]).astype(np.float64)


def remote_denoiser(endpoint: str, timeout: float = 60.0, retries: int = 3) -> RemoteDenoiser:
    """endpoint is "host:port" (port optional, default 7341)."""
    if ":" in endpoint:
        host, port = endpoint.rsplit(":", 1)
        return RemoteDenoiser(host, int(port), timeout=timeout, retries=retries)
    return RemoteDenoiser(endpoint, timeout=timeout, retries=retries)
