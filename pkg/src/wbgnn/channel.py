"""Wideband multi-user channel generation and dataset persistence.

The generator is a clustered-ray stand-in for an urban-macro NLOS model:
per user a position, 3D distance, pathloss plus log-normal shadowing, then a
handful of delayed clusters of rays seen through uniform planar arrays at
both ends.  The channel on RB ``m`` is the sum of ray contributions rotated
by ``exp(-2j pi f_m tau)``, so adjacent RBs stay correlated.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import _kernels

DATASET_MAGIC = b"WBCH"
DATASET_VERSION = 1
AREA_MODES = ("uma-sector", "crowded-box")


class DatasetError(IOError):
    pass


@dataclass
class ScenarioConfig:
    fc_ghz: float = 28.0
    bandwidth_mhz: float = 400.0
    scs_khz: float = 120.0
    max_rb: int = 264
    num_rb: int = 2
    num_users: int = 6
    num_sched: int = 2
    num_tx: int = 4
    num_rx: int = 1
    num_rf: int = 2
    p_tot_dbm: float = 46.0
    n0_dbm_hz: float = -174.0
    nf_db: float = 7.0
    cell_radius: float = 250.0
    min_distance: float = 35.0
    h_bs: float = 25.0
    h_ue: float = 1.5
    shadow_std_db: float = 6.0
    n_clusters: int = 8
    n_rays: int = 10
    delay_spread_ns: float = 300.0
    area: str = "uma-sector"
    box_center_x: float = 100.0
    box_center_y: float = 0.0
    box_side: float = 10.0
    dup_users: int = 0
    dup_noise: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_sched > self.num_rf:
            raise ValueError("num_sched must not exceed num_rf")
        if self.num_rb > self.max_rb:
            raise ValueError("num_rb must not exceed max_rb")
        if self.n_clusters < 1 or self.n_rays < 1:
            raise ValueError("need at least one cluster and one ray")
        if self.area not in AREA_MODES:
            raise ValueError(f"area must be one of {AREA_MODES}")
        if min(self.num_rb, self.num_users, self.num_tx, self.num_rx, self.num_sched) < 1:
            raise ValueError("dimensions must be positive")
        if self.dup_users >= self.num_users and self.dup_users > 0:
            raise ValueError("dup_users must be smaller than num_users")
        for name in ("p_tot_dbm", "n0_dbm_hz", "nf_db", "fc_ghz", "bandwidth_mhz"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def p_tot(self) -> float:
        """Total transmit power in watts."""
        return 10 ** ((self.p_tot_dbm - 30) / 10)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.num_rb, self.num_users, self.num_rx, self.num_tx

    def replace(self, **changes) -> "ScenarioConfig":
        d = asdict(self)
        d.update(changes)
        return ScenarioConfig(**d)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ScenarioConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in mapping.items():
            if key not in kinds:
                raise KeyError(f"unknown scenario key {key!r}")
            kw[key] = _coerce(raw, kinds[key])
        return cls(**kw)

    def to_mapping(self) -> dict:
        return asdict(self)


def _coerce(raw, kind):
    if not isinstance(raw, str):
        return raw
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw.strip()


# -- config files -------------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_config(mapping: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


def write_config(path, mapping: dict):
    Path(path).write_text(format_config(mapping))


# -- link budget ------------------------------------------------------------------

def pathloss_db(d_3d: float, fc_ghz: float, h_ue: float) -> float:
    """UMa NLOS pathloss in dB."""
    d_3d = np.asarray(d_3d, dtype=float)
    if np.any(d_3d <= 0):
        raise ValueError("distance must be positive")
    return 13.54 + 39.08 * np.log10(d_3d) + 20 * np.log10(fc_ghz) - 0.6 * (h_ue - 1.5)


def noise_power_dbm(cfg: ScenarioConfig) -> float:
    if cfg.bandwidth_mhz <= 0 or cfg.max_rb < 1:
        raise ValueError("bandwidth and max_rb must be positive")
    p_n = cfg.n0_dbm_hz + 10 * np.log10(cfg.bandwidth_mhz * 1e6) + cfg.nf_db
    return p_n - 10 * np.log10(cfg.max_rb)


def noise_power_per_rb(cfg: ScenarioConfig) -> float:
    """Noise power on one RB in watts."""
    return 10 ** ((noise_power_dbm(cfg) - 30) / 10)


def rb_frequencies(cfg: ScenarioConfig) -> np.ndarray:
    """Baseband centre offsets (Hz) of ``num_rb`` contiguous RBs."""
    rb_width = 12 * cfg.scs_khz * 1e3
    return (np.arange(cfg.num_rb) - (cfg.num_rb - 1) / 2) * rb_width


# -- geometry ---------------------------------------------------------------------

def _grid_shape(n: int) -> tuple[int, int]:
    rows = int(np.floor(np.sqrt(n)))
    while n % rows:
        rows -= 1
    return n // rows, rows


def upa_response(n: int, azimuth: np.ndarray, elevation: np.ndarray) -> np.ndarray:
    """Half-wavelength UPA responses, shape (len(azimuth), n), unit-modulus."""
    n_h, n_v = _grid_shape(n)
    ph = np.repeat(np.arange(n_v), n_h)[None, :]
    pv = np.tile(np.arange(n_h), n_v)[None, :]
    az = np.asarray(azimuth)[:, None]
    el = np.asarray(elevation)[:, None]
    return np.exp(1j * np.pi * (pv * np.sin(az) * np.cos(el) + ph * np.sin(el)))


def _user_positions(cfg: ScenarioConfig, rng, distances):
    k = cfg.num_users
    if distances is not None:
        d2 = np.broadcast_to(np.asarray(distances, dtype=float), (k,))
        az = rng.uniform(-np.pi / 3, np.pi / 3, k)
        return d2 * np.cos(az), d2 * np.sin(az)
    if cfg.area == "uma-sector":
        r = np.sqrt(rng.uniform(cfg.min_distance**2, cfg.cell_radius**2, k))
        az = rng.uniform(-np.pi / 3, np.pi / 3, k)
        return r * np.cos(az), r * np.sin(az)
    half = cfg.box_side / 2
    x = cfg.box_center_x + rng.uniform(-half, half, k)
    y = cfg.box_center_y + rng.uniform(-half, half, k)
    return x, y


def _cluster_profile(cfg, rng):
    c = cfg.n_clusters
    ds = cfg.delay_spread_ns * 1e-9
    delay = np.sort(-ds * np.log(rng.uniform(1e-12, 1.0, c)))
    delay -= delay[0]
    power = np.exp(-delay / ds) * 10 ** (-rng.normal(0.0, 3.0, c) / 10)
    power /= power.sum()
    return delay, power


_ASD_CLUSTER = np.deg2rad(10.0)
_ZSD_CLUSTER = np.deg2rad(3.0)
_ASD_RAY = np.deg2rad(2.0)
_ASA_RAY = np.deg2rad(15.0)


def _rays(cfg, rng, los_az, los_el, delay, power, shared=None):
    """Per-ray (coef, delay, aod_az, aod_el, aoa_az, aoa_el) for one user."""
    c, r = cfg.n_clusters, cfg.n_rays
    if shared is None:
        c_az = los_az + rng.normal(0.0, _ASD_CLUSTER, c)
        c_el = los_el + rng.normal(0.0, _ZSD_CLUSTER, c)
        a_az = rng.uniform(-np.pi, np.pi, c)
        a_el = rng.normal(0.0, np.deg2rad(10.0), c)
        aod_az = np.repeat(c_az, r) + rng.normal(0.0, _ASD_RAY, c * r)
        aod_el = np.repeat(c_el, r) + rng.normal(0.0, _ASD_RAY / 2, c * r)
        aoa_az = np.repeat(a_az, r) + rng.normal(0.0, _ASA_RAY, c * r)
        aoa_el = np.repeat(a_el, r) + rng.normal(0.0, _ASA_RAY / 2, c * r)
    else:
        # common scatterers: only the departure direction follows the user
        aod_az = shared["aod_az"] + (los_az - shared["ref_az"])
        aod_el = shared["aod_el"] + (los_el - shared["ref_el"])
        aoa_az, aoa_el = shared["aoa_az"], shared["aoa_el"]
    amp = np.sqrt(np.repeat(power, r) / r)
    phase = rng.uniform(-np.pi, np.pi, c * r)
    coef = amp * np.exp(1j * phase)
    return coef, np.repeat(delay, r), aod_az, aod_el, aoa_az, aoa_el


def generate_sample(cfg: ScenarioConfig, seed: int, distances=None) -> np.ndarray:
    """One channel tensor of shape (M, K*N_R, N_T), complex128.

    ``distances`` optionally pins the 2D BS-user distances (metres).
    """
    rng = np.random.default_rng(seed)
    m, k, n_r, n_t = cfg.dims
    freqs = rb_frequencies(cfg)
    x, y = _user_positions(cfg, rng, distances)
    d2 = np.hypot(x, y)
    d3 = np.hypot(d2, cfg.h_bs - cfg.h_ue)
    los_az = np.arctan2(y, x)
    los_el = -np.arctan2(cfg.h_bs - cfg.h_ue, d2)
    shadow = rng.normal(0.0, cfg.shadow_std_db, k)
    gain = 10 ** (-(pathloss_db(d3, cfg.fc_ghz, cfg.h_ue) + shadow) / 10)

    shared = None
    if cfg.area == "crowded-box":
        delay, power = _cluster_profile(cfg, rng)
        ref_az = np.arctan2(cfg.box_center_y, cfg.box_center_x)
        ref_el = -np.arctan2(cfg.h_bs - cfg.h_ue, np.hypot(cfg.box_center_x, cfg.box_center_y))
        c, r = cfg.n_clusters, cfg.n_rays
        shared = {
            "ref_az": ref_az,
            "ref_el": ref_el,
            "aod_az": np.repeat(ref_az + rng.normal(0.0, _ASD_CLUSTER, c), r)
            + rng.normal(0.0, _ASD_RAY, c * r),
            "aod_el": np.repeat(ref_el + rng.normal(0.0, _ZSD_CLUSTER, c), r)
            + rng.normal(0.0, _ASD_RAY / 2, c * r),
            "aoa_az": np.repeat(rng.uniform(-np.pi, np.pi, c), r)
            + rng.normal(0.0, _ASA_RAY, c * r),
            "aoa_el": np.repeat(rng.normal(0.0, np.deg2rad(10.0), c), r)
            + rng.normal(0.0, _ASA_RAY / 2, c * r),
        }

    h = np.empty((m, k * n_r, n_t), dtype=np.complex128)
    for u in range(k):
        if shared is None:
            delay, power = _cluster_profile(cfg, rng)
        coef, tau, dz, de, az, ae = _rays(cfg, rng, los_az[u], los_el[u], delay, power, shared)
        a_tx = upa_response(n_t, dz, de)
        a_rx = upa_response(n_r, az, ae)
        hu = _kernels.ray_sum(coef, tau, freqs, a_rx, a_tx)
        h[:, u * n_r:(u + 1) * n_r, :] = np.sqrt(gain[u]) * hu

    if cfg.dup_users:
        h = _duplicate_strongest(h, cfg, rng)
    return h


def _duplicate_strongest(h, cfg, rng):
    m, k, n_r, n_t = cfg.dims
    blocks = h.reshape(m, k, n_r, n_t)
    strength = np.sum(np.abs(blocks) ** 2, axis=(0, 2, 3))
    src = int(np.argmax(strength))
    others = [i for i in range(k) if i != src]
    targets = rng.choice(others, size=cfg.dup_users, replace=False)
    rms = np.sqrt(strength[src] / (m * n_r * n_t))
    for t in np.sort(targets):
        noise = rng.normal(size=blocks[:, src].shape) + 1j * rng.normal(size=blocks[:, src].shape)
        blocks[:, t] = blocks[:, src] + cfg.dup_noise * rms * noise / np.sqrt(2)
    return blocks.reshape(m, k * n_r, n_t)


@dataclass
class Dataset:
    config: ScenarioConfig
    channels: np.ndarray  # (S, M, K*N_R, N_T) complex128
    split: str = "train"

    def __post_init__(self):
        if self.channels.ndim != 4 or self.channels.shape[0] == 0:
            raise ValueError("dataset needs a non-empty (S, M, K*N_R, N_T) array")

    def __len__(self) -> int:
        return self.channels.shape[0]


def generate_dataset(
    cfg: ScenarioConfig, n_samples: int, base_seed: int, split: str = "train", threads: int = 1
) -> Dataset:
    seeds = [base_seed + i for i in range(n_samples)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            samples = list(pool.map(lambda s: generate_sample(cfg, s), seeds))
    else:
        samples = [generate_sample(cfg, s) for s in seeds]
    return Dataset(cfg, np.stack(samples), split)


# -- binary format -----------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIII")


def write_dataset(path, ds: Dataset):
    s, m, kr, n_t = ds.channels.shape
    n_r = ds.config.num_rx
    k = kr // n_r
    meta = format_config({**ds.config.to_mapping(), "split": ds.split}).encode()
    payload = np.empty(ds.channels.shape + (2,), dtype="<f8")
    payload[..., 0] = ds.channels.real
    payload[..., 1] = ds.channels.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, m, k, n_r, n_t, s, len(meta)))
        fh.write(meta)
        fh.write(payload.tobytes())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError("file too short for header")
    magic, version, m, k, n_r, n_t, s, meta_len = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DatasetError(f"bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported version {version}")
    start = _HEADER.size + meta_len
    expected = s * m * k * n_r * n_t * 2 * 8
    if len(raw) - start != expected:
        raise DatasetError(f"payload is {len(raw) - start} bytes, header implies {expected}")
    try:
        meta = dict(
            (a.strip(), b.strip())
            for a, b in (ln.split("=", 1) for ln in raw[_HEADER.size:start].decode().splitlines())
        )
    except ValueError as exc:
        raise DatasetError("corrupt metadata block") from exc
    split = meta.pop("split", "train")
    cfg = ScenarioConfig.from_mapping(meta)
    if cfg.dims != (m, k, n_r, n_t):
        raise DatasetError("metadata dims disagree with header")
    flat = np.frombuffer(raw, dtype="<f8", offset=start).reshape(s, m, k * n_r, n_t, 2)
    channels = np.empty(flat.shape[:-1], dtype=np.complex128)
    channels.real = flat[..., 0]
    channels.imag = flat[..., 1]
    return Dataset(cfg, channels, split)
