"""Truth state -> measured attributable: geometry, photometry, S/N, noise."""
from __future__ import annotations

import configparser
import math
import zlib
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .astro import (ARCSEC, AU_KM, C_LIGHT, DAY, R_EARTH, TWO_PI, Station,
                    station_position_velocity, sun_direction)


# --------------------------------------------------------------------------
# models

@dataclass(frozen=True)
class PhotometryModel:
    albedo: float = 0.1
    phase_slope_mag_per_deg: float = 3.2 / 90.0

    def phase_correction(self, phase):
        """Magnitude penalty for phase angle(s) in radians (0 at opposition)."""
        return self.phase_slope_mag_per_deg * np.degrees(phase)


@dataclass(frozen=True)
class InstrumentModel:
    aperture_m: float = 1.0
    fov_deg2: float = 45.0
    pixel_scale_arcsec: float = 1.5
    exposure_s: float = 1.0
    cadence_s: float = 3.0
    read_noise_e: float = 3.0
    dark_current_e_per_s: float = 0.1
    sky_rate_e_per_s: float = 50.0
    zero_point_e_per_s: float = 3.204852e9
    snr_threshold: float = 6.0
    astrometric_floor_arcsec: float = 0.4
    degraded_sigma_arcsec: float = 2.0
    max_rate_arcsec_per_s: float = 2000.0
    min_elevation_deg: float = 15.0
    sun_elevation_max_deg: float = -12.0
    photometry: PhotometryModel = field(default_factory=PhotometryModel)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and f.name not in ("min_elevation_deg", "sun_elevation_max_deg") and v < 0:
                raise ValueError(f"instrument field {f.name} must be nonnegative")
        if self.snr_threshold <= 0:
            raise ValueError("snr_threshold must be positive")

    @property
    def fov_half_width_arcsec(self) -> float:
        return 0.5 * math.sqrt(self.fov_deg2) * 3600.0

    @property
    def noise_per_pixel(self) -> float:
        t = self.exposure_s
        return self.read_noise_e**2 + self.dark_current_e_per_s * t + self.sky_rate_e_per_s * t


def load_instrument(path=None) -> InstrumentModel:
    """Read an instrument INI file; ``None`` loads the bundled defaults."""
    cp = configparser.ConfigParser()
    if path is None:
        cp.read_string(resources.files("debriscat.data").joinpath("instrument.ini").read_text())
    else:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"instrument config not found: {path}")
        cp.read(path)
    return instrument_from_config(cp)


def instrument_from_config(cp: configparser.ConfigParser) -> InstrumentModel:
    kwargs = {}
    names = {f.name for f in fields(InstrumentModel)} - {"photometry"}
    if cp.has_section("instrument"):
        for key, value in cp.items("instrument"):
            if key not in names:
                raise ValueError(f"[instrument] unknown key {key!r}")
            try:
                kwargs[key] = float(value)
            except ValueError:
                raise ValueError(f"[instrument] {key}: not a number: {value!r}") from None
    phot = {}
    if cp.has_section("photometry"):
        for key, value in cp.items("photometry"):
            if key not in ("albedo", "phase_slope_mag_per_deg"):
                raise ValueError(f"[photometry] unknown key {key!r}")
            phot[key] = float(value)
    return InstrumentModel(**kwargs, photometry=PhotometryModel(**phot))


def instrument_to_config(inst: InstrumentModel) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp["instrument"] = {f.name: repr(getattr(inst, f.name)) for f in fields(inst) if f.name != "photometry"}
    cp["photometry"] = {"albedo": repr(inst.photometry.albedo),
                        "phase_slope_mag_per_deg": repr(inst.photometry.phase_slope_mag_per_deg)}
    return cp


# --------------------------------------------------------------------------
# geometry

@dataclass(frozen=True)
class TopocentricView:
    ra: float
    dec: float
    ra_rate: float      # rad/s
    dec_rate: float     # rad/s
    range: float        # km
    range_rate: float   # km/s
    elevation: float    # rad

    @property
    def proper_motion(self) -> float:
        return math.hypot(self.dec_rate, self.ra_rate * math.cos(self.dec))


def unit_vectors(ra, dec):
    """rho_hat and its partials with respect to ra and dec (..., 3 each)."""
    ca, sa = np.cos(ra), np.sin(ra)
    cd, sd = np.cos(dec), np.sin(dec)
    rho = np.stack([ca * cd, sa * cd, sd], axis=-1)
    d_ra = np.stack([-sa * cd, ca * cd, np.zeros_like(ca * cd)], axis=-1)
    d_dec = np.stack([-ca * sd, -sa * sd, cd], axis=-1)
    return rho, d_ra, d_dec


def topocentric_arrays(r, v, q, qdot):
    """(ra, dec, ra_rate, dec_rate, rho, rho_dot) for relative state r - q, v - qdot."""
    d = np.asarray(r) - np.asarray(q)
    dv = np.asarray(v) - np.asarray(qdot)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    vx, vy, vz = dv[..., 0], dv[..., 1], dv[..., 2]
    rxy2 = x * x + y * y
    rxy = np.sqrt(rxy2)
    rho = np.sqrt(rxy2 + z * z)
    ra = np.mod(np.arctan2(y, x), TWO_PI)
    dec = np.arctan2(z, rxy)
    rho_dot = (x * vx + y * vy + z * vz) / rho
    ra_rate = (x * vy - y * vx) / rxy2
    dec_rate = (vz * rxy2 - z * (x * vx + y * vy)) / (rho * rho * rxy)
    return ra, dec, ra_rate, dec_rate, rho, rho_dot


def reconstruct_state(ra, dec, ra_rate, dec_rate, rho, rho_dot, q, qdot):
    """Position and velocity from angles, rates, range and range rate (r = q + rho rho_hat)."""
    u, u_a, u_d = unit_vectors(ra, dec)
    rho = np.asarray(rho)[..., None]
    rho_dot = np.asarray(rho_dot)[..., None]
    du = np.asarray(ra_rate)[..., None] * u_a + np.asarray(dec_rate)[..., None] * u_d
    r = q + rho * u
    v = qdot + rho_dot * u + rho * du
    return r, v


def elevation_of(r, q):
    """Elevation (rad) of position(s) r seen from station position(s) q, spherical Earth."""
    d = np.asarray(r) - np.asarray(q)
    up = np.asarray(q) / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.arcsin(np.clip(np.sum(d * up, axis=-1) / np.linalg.norm(d, axis=-1), -1.0, 1.0))


def topocentric_view(obj_state, station: Station, epoch: float) -> TopocentricView:
    """Geometric view of an object state (r, v at ``epoch``) from a station."""
    x = np.asarray(obj_state.vector if hasattr(obj_state, "vector") else obj_state, dtype=float)
    q, qd = station_position_velocity(station, epoch)
    ra, dec, rad, decd, rho, rhod = topocentric_arrays(x[:3], x[3:6], q, qd)
    return TopocentricView(float(ra), float(dec), float(rad), float(decd), float(rho), float(rhod),
                           float(elevation_of(x[:3], q)))


def slant_range(altitude: float, elevation: float) -> float:
    """Range (km) to an object at ``altitude`` km seen at ``elevation`` rad."""
    se = math.sin(elevation)
    return -R_EARTH * se + math.sqrt((R_EARTH * se) ** 2 + 2 * R_EARTH * altitude + altitude**2)


def ground_distance(altitude: float, elevation: float) -> float:
    """Great-circle distance (km) from the station to the sub-object point."""
    rho = slant_range(altitude, elevation)
    # law of sines in the Earth-centre / station / object triangle
    angle = math.asin(rho * math.cos(elevation) / (R_EARTH + altitude))
    return R_EARTH * angle


def in_earth_shadow(r, sun):
    """Cylindrical Earth shadow test; broadcasts over leading axes."""
    r = np.asarray(r, dtype=float)
    sun = np.asarray(sun, dtype=float)
    along = np.sum(r * sun, axis=-1)
    perp = r - along[..., None] * sun
    out = (along < 0.0) & (np.linalg.norm(perp, axis=-1) < R_EARTH)
    return bool(out) if out.ndim == 0 else out


def solar_elevation(q, sun):
    up = np.asarray(q) / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.arcsin(np.clip(np.sum(up * sun, axis=-1), -1.0, 1.0))


def station_dark(station: Station, epoch, threshold_deg: float = -12.0):
    q, _ = station_position_velocity(station, epoch)
    out = solar_elevation(q, sun_direction(epoch)) < math.radians(threshold_deg)
    return bool(out) if np.ndim(out) == 0 else out


def phase_angle(obj, station_pos, sun):
    """Sun-object-observer angle (rad); the Sun is taken at infinity along ``sun``."""
    to_obs = np.asarray(station_pos) - np.asarray(obj)
    to_obs = to_obs / np.linalg.norm(to_obs, axis=-1, keepdims=True)
    c = np.clip(np.sum(to_obs * sun, axis=-1), -1.0, 1.0)
    out = np.arccos(c)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# photometry and S/N

def absolute_magnitude(diameter_m, photometry: PhotometryModel = PhotometryModel()):
    d = np.asarray(diameter_m, dtype=float)
    if np.any(d <= 0):
        raise ValueError("diameter must be positive")
    H = 33.0 - 5.0 * np.log10(d) - 2.5 * math.log10(photometry.albedo / 0.1)
    return float(H) if H.ndim == 0 else H


def apparent_magnitude(H, rho_km, phase, photometry: PhotometryModel = PhotometryModel()):
    """Apparent magnitude with the Sun fixed at 1 AU; brighter when closer."""
    h = H + 5.0 * np.log10(np.asarray(rho_km) / AU_KM) + photometry.phase_correction(phase)
    return float(h) if np.ndim(h) == 0 else h


@dataclass(frozen=True)
class SnrBudget:
    signal: float
    noise: float
    trail_length: int
    snr_star: float
    snr_pixel: float
    snr_trail: float

    @property
    def end_variance(self) -> float:
        """Endpoint-location variance Z in pixels^2."""
        return 1.0 / self.snr_pixel**2


def snr_from_signal(S: float, N: float, T: int) -> SnrBudget:
    star = S / math.sqrt(S + N)
    pixel = (S / T) / math.sqrt(S / T + N)
    trail = S / math.sqrt(S + N * T)
    return SnrBudget(S, N, T, star, pixel, trail)


def trail_length(rate_arcsec, inst: InstrumentModel) -> int:
    return max(1, math.ceil(rate_arcsec * inst.exposure_s / inst.pixel_scale_arcsec - 1e-9))


def snr_trail(h: float, rate_arcsec: float, inst: InstrumentModel) -> SnrBudget:
    """S/N budget of a trail of apparent magnitude ``h`` moving at ``rate_arcsec`` per second."""
    S = inst.zero_point_e_per_s * 10.0 ** (-0.4 * h) * inst.exposure_s
    return snr_from_signal(S, inst.noise_per_pixel, trail_length(rate_arcsec, inst))


def astrometric_sigma(budget: SnrBudget, inst: InstrumentModel) -> tuple[float, bool]:
    sigma = max(inst.astrometric_floor_arcsec, inst.pixel_scale_arcsec / budget.snr_pixel)
    return sigma, sigma > inst.degraded_sigma_arcsec


def calibrate_zero_point(inst: InstrumentModel, target_snr: float = 6.0, diameter_m: float = 0.08,
                         rho_km: float = 2000.0, phase_deg: float = 60.0, rate_arcsec: float = 700.0) -> float:
    """Zero point putting the reference object exactly at ``target_snr``."""
    H = absolute_magnitude(diameter_m, inst.photometry)
    h = apparent_magnitude(H, rho_km, math.radians(phase_deg), inst.photometry)
    NT = inst.noise_per_pixel * trail_length(rate_arcsec, inst)
    s2 = target_snr**2
    S = 0.5 * (s2 + math.sqrt(s2 * s2 + 4.0 * s2 * NT))
    return S / (10.0 ** (-0.4 * h) * inst.exposure_s)


# --------------------------------------------------------------------------
# attributables and synthesis

@dataclass(frozen=True)
class Attributable:
    ra: float
    dec: float
    ra_rate: float
    dec_rate: float
    epoch: float
    station: Station
    covariance: np.ndarray
    mode: str = "survey"
    trail_id: Optional[int] = None

    def __post_init__(self):
        if not -math.pi / 2 < self.dec < math.pi / 2:
            raise ValueError("declination must lie in (-pi/2, pi/2)")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.ra, self.dec, self.ra_rate, self.dec_rate])

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def with_id(self, trail_id: int) -> "Attributable":
        return replace(self, trail_id=trail_id)

    def observer(self):
        # cached: the fit loop asks for it on every evaluation
        cached = self.__dict__.get("_observer")
        if cached is None:
            cached = station_position_velocity(self.station, self.epoch)
            object.__setattr__(self, "_observer", cached)
        return cached


def attributable_covariance(sigma_arcsec: float, dec: float, exposure_s: float) -> np.ndarray:
    s = sigma_arcsec * ARCSEC
    sr = math.sqrt(2.0) * s / exposure_s
    cd = math.cos(dec)
    return np.diag([(s / cd) ** 2, s * s, (sr / cd) ** 2, sr * sr])


def stream_key(*parts) -> int:
    """Stable 32-bit key for strings or numbers, used to seed per-record streams."""
    return zlib.crc32("|".join(str(p) for p in parts).encode())


def night_index(station: Station, t: float) -> int:
    """Local-night counter: changes at local mean noon."""
    return math.floor(t + station.lon / TWO_PI)


def night_is_clear(station: Station, t: float, seed: int) -> bool:
    p = station.cloud_probability
    if p <= 0.0:
        return True
    if p >= 1.0:
        return False
    rng = np.random.default_rng([seed, stream_key("weather", station.name), night_index(station, t) + 10**6])
    return bool(rng.random() >= p)


@dataclass(frozen=True)
class Detection:
    attributable: Optional[Attributable]
    reason: str                 # "detected" or the failed condition
    snr: Optional[SnrBudget] = None
    magnitude: Optional[float] = None
    phase: Optional[float] = None
    sigma_arcsec: Optional[float] = None
    degraded: bool = False

    @property
    def detected(self) -> bool:
        return self.attributable is not None


def light_time_view(truth, station: Station, t: float, iterations: int = 2):
    """Object state at the emission epoch t - rho/c and observer state at ``t``."""
    q, qd = station_position_velocity(station, t)
    x = truth.state_at(t)
    t_emit = t
    for _ in range(iterations):
        rho = np.linalg.norm(x[:3] - q)
        t_emit = t - rho / C_LIGHT / DAY
        x = truth.state_at(t_emit)
    return x, q, qd, t_emit


def synthesize_observation(truth, station: Station, epoch: float, mode: str, seed: int,
                           inst: InstrumentModel = InstrumentModel(), weather: bool = True) -> Detection:
    """Simulate one exposure of ``truth`` from ``station`` at ``epoch``.

    Survey exposures are sidereal, so the image rate is the proper motion;
    tasking exposures track the object (single-pixel image).
    """
    if mode not in ("survey", "tasking"):
        raise ValueError(f"unknown mode {mode!r}")
    x, q, qd, _ = light_time_view(truth, station, epoch)
    r, v = x[:3], x[3:]
    sun = sun_direction(epoch)
    if elevation_of(r, q) < math.radians(inst.min_elevation_deg):
        return Detection(None, "elevation")
    if solar_elevation(q, sun) >= math.radians(inst.sun_elevation_max_deg):
        return Detection(None, "daylight")
    if in_earth_shadow(r, sun):
        return Detection(None, "shadow")
    if weather and not night_is_clear(station, epoch, seed):
        return Detection(None, "cloud")
    ra, dec, rad, decd, rho, _ = topocentric_arrays(r, v, q, qd)
    eta = math.hypot(decd, rad * math.cos(dec)) / ARCSEC
    if mode == "tasking" and eta > inst.max_rate_arcsec_per_s:
        return Detection(None, "rate")
    phase = phase_angle(r, q, sun)
    H = absolute_magnitude(truth.diameter, replace(inst.photometry, albedo=truth.albedo))
    h = apparent_magnitude(H, rho, phase, inst.photometry)
    budget = snr_trail(h, 0.0 if mode == "tasking" else eta, inst)
    if budget.snr_trail < inst.snr_threshold:
        return Detection(None, "snr", budget, h, phase)
    sigma, degraded = astrometric_sigma(budget, inst)
    cov = attributable_covariance(sigma, float(dec), inst.exposure_s)
    rng = np.random.default_rng([seed, stream_key(truth.id), stream_key(station.name),
                                 round(epoch * DAY * 1000)])
    noisy = np.array([ra, dec, rad, decd]) + rng.standard_normal(4) * np.sqrt(np.diag(cov))
    noisy[0] %= TWO_PI
    att = Attributable(*[float(v) for v in noisy], epoch=epoch, station=station,
                       covariance=cov, mode=mode)
    return Detection(att, "detected", budget, h, phase, sigma, degraded)
