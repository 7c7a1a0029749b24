"""On-disk formats: model bundles, sealed detector state and a sync directory.

Bundle layout (all integers little-endian)::

    b"SODM" | u16 version | u16 section count
    per section: u16 name length | name (utf-8) | u64 payload length | payload

Array payloads are a u32 array count followed by, per array, a dtype byte
(``f`` = binary64, ``i`` = int64), u8 ndim, u64 dims and the raw
little-endian data. The ``meta`` section is sorted-key JSON carrying only
integers and strings; every float lives in an array section.

Sealed state layout::

    b"SODX" | u16 version | 24-byte nonce | XSalsa20-Poly1305 box

The box holds the serialized :class:`~leakguard.detector.DetectorState`.
"""
from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pysodium

from . import nn
from .autoencoder import Autoencoder
from .detector import ADVERSARIAL, BENIGN, CalibrationTable, DetectorConfig, DetectorState
from .errors import DomainError, FormatError, TamperError
from .service_models import DecisionTree, NetworkModel, RandomForest

BUNDLE_MAGIC = b"SODM"
BUNDLE_VERSION = 1
STATE_MAGIC = b"SODX"
STATE_VERSION = 1
NONCE_BYTES = pysodium.crypto_secretbox_NONCEBYTES
KEY_BYTES = pysodium.crypto_secretbox_KEYBYTES
KEY_ENV = "LEAKGUARD_STATE_KEY"
DEFAULT_SYNC_EVERY = 10


# -- low-level packing --------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes, section: str):
        self.data = data
        self.pos = 0
        self.section = section

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated data in section {self.section!r}", section=self.section)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"trailing bytes in section {self.section!r}", section=self.section)


def _pack_arrays(arrays) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.asarray(a)
        if np.issubdtype(a.dtype, np.integer):
            code, data = b"i", a.astype("<i8")
        else:
            code, data = b"f", a.astype("<f8")
        out.append(code + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(data.tobytes(order="C"))
    return b"".join(out)


def _unpack_arrays(payload: bytes, section: str) -> list:
    r = _Reader(payload, section)
    (count,) = r.unpack("<I")
    arrays = []
    for _ in range(count):
        code = r.take(1)
        if code not in (b"f", b"i"):
            raise FormatError(f"bad array type in section {section!r}", section=section)
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        dtype = "<f8" if code == b"f" else "<i8"
        raw = r.take(8 * n)
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        arrays.append(arr.astype(np.float64 if code == b"f" else np.int64))
    r.done()
    return arrays


def _pack_sections(magic: bytes, version: int, sections) -> bytes:
    out = [magic, struct.pack("<HH", version, len(sections))]
    for name, payload in sections:
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


def _unpack_sections(data: bytes, magic: bytes, version: int) -> dict:
    r = _Reader(data, "header")
    if r.take(len(magic)) != magic:
        raise FormatError("bad magic bytes", section="header")
    ver, count = r.unpack("<HH")
    if ver != version:
        raise FormatError(f"unsupported version {ver}", section="header")
    sections = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8", errors="replace")
        r.section = name
        (length,) = r.unpack("<Q")
        sections[name] = r.take(length)
    r.section = "trailer"
    r.done()
    return sections


def _layers_meta(layers):
    return [[l.fan_in, l.fan_out, l.activation] for l in layers]


def _layers_arrays(layers):
    return [a for l in layers for a in (l.weight, l.bias)]


def _layers_from(meta, arrays, section):
    if len(arrays) != 2 * len(meta):
        raise FormatError(f"layer count mismatch in section {section!r}", section=section)
    layers = []
    for i, (fan_in, fan_out, act) in enumerate(meta):
        w, b = arrays[2 * i], arrays[2 * i + 1]
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise FormatError(f"layer {i} shape mismatch in section {section!r}", section=section)
        layers.append(nn.Layer(w, b, act))
    return layers


# -- bundles ------------------------------------------------------------------

@dataclass
class ModelBundle:
    ae: Autoencoder
    service: object
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    calibration: CalibrationTable | None = None
    feature_ranges: tuple | None = None
    magnet_threshold: float | None = None
    dataset: str = ""

    @property
    def num_classes(self) -> int:
        return self.service.num_classes


def bundle_bytes(bundle: ModelBundle) -> bytes:
    ae, svc = bundle.ae, bundle.service
    meta = {
        "k": ae.input_dim, "m": ae.latent_dim, "C": svc.num_classes, "dataset": bundle.dataset,
        "encoder": _layers_meta(ae.encoder), "decoder": _layers_meta(ae.decoder),
        "service_kind": svc.kind, "max_horizon": bundle.detector.max_horizon,
    }
    if isinstance(svc, RandomForest):
        svc_arrays = [a for t in svc.trees for a in (t.feature, t.threshold, t.left, t.right, t.value)]
        meta["trees"] = len(svc.trees)
        meta["service_input"] = svc.input_dim
    else:
        svc_arrays = _layers_arrays(svc.layers)
        meta["service_layers"] = _layers_meta(svc.layers)
    d = bundle.detector
    sections = [
        ("meta", json.dumps(meta, sort_keys=True).encode()),
        ("autoencoder", _pack_arrays(_layers_arrays(ae.encoder) + _layers_arrays(ae.decoder))),
        ("service", _pack_arrays(svc_arrays)),
        ("detector", _pack_arrays([np.array([d.alpha, d.beta, d.gamma, d.delta])])),
    ]
    if bundle.calibration is not None:
        c = bundle.calibration
        sections.append(("calibration", _pack_arrays([c.lo, c.hi, c.mean_norm,
                                                       np.array([c.sessions])])))
    if bundle.feature_ranges is not None:
        sections.append(("features", _pack_arrays(list(bundle.feature_ranges))))
    if bundle.magnet_threshold is not None:
        sections.append(("baselines", _pack_arrays([np.array([bundle.magnet_threshold])])))
    return _pack_sections(BUNDLE_MAGIC, BUNDLE_VERSION, sections)


def bundle_from_bytes(data: bytes) -> ModelBundle:
    sections = _unpack_sections(data, BUNDLE_MAGIC, BUNDLE_VERSION)
    for required in ("meta", "autoencoder", "service", "detector"):
        if required not in sections:
            raise FormatError(f"missing section {required!r}", section=required)
    try:
        meta = json.loads(sections["meta"].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable meta: {e}", section="meta") from None
    try:
        ae_arrays = _unpack_arrays(sections["autoencoder"], "autoencoder")
        n_enc = 2 * len(meta["encoder"])
        ae = Autoencoder(_layers_from(meta["encoder"], ae_arrays[:n_enc], "autoencoder"),
                         _layers_from(meta["decoder"], ae_arrays[n_enc:], "autoencoder"),
                         meta["k"], meta["m"])
        svc_arrays = _unpack_arrays(sections["service"], "service")
        if meta["service_kind"] == "random_forest":
            if len(svc_arrays) != 5 * meta["trees"]:
                raise FormatError("tree count mismatch", section="service")
            trees = [DecisionTree(*svc_arrays[5 * i:5 * i + 5]) for i in range(meta["trees"])]
            svc = RandomForest(trees, meta["C"], meta["service_input"])
        else:
            layers = _layers_from(meta["service_layers"], svc_arrays, "service")
            svc = NetworkModel(meta["service_kind"], layers, meta["C"], layers[0].fan_in)
        (weights,) = _unpack_arrays(sections["detector"], "detector")
        det = DetectorConfig(*(float(v) for v in weights), max_horizon=meta["max_horizon"])
        cal = None
        if "calibration" in sections:
            lo, hi, mean_norm, sessions = _unpack_arrays(sections["calibration"], "calibration")
            cal = CalibrationTable(lo, hi, mean_norm, int(sessions[0]))
        ranges = None
        if "features" in sections:
            ranges = tuple(_unpack_arrays(sections["features"], "features"))
        thr = None
        if "baselines" in sections:
            thr = float(_unpack_arrays(sections["baselines"], "baselines")[0][0])
    except KeyError as e:
        raise FormatError(f"meta lacks field {e}", section="meta") from None
    except DomainError as e:
        raise FormatError(f"inconsistent model data: {e}", section="model") from None
    return ModelBundle(ae, svc, det, cal, ranges, thr, meta.get("dataset", ""))


def save_bundle(bundle: ModelBundle, path) -> None:
    atomic_write(path, bundle_bytes(bundle))


def load_bundle(path) -> ModelBundle:
    return bundle_from_bytes(Path(path).read_bytes())


# -- detector state -----------------------------------------------------------

_STATE_HEAD = "<IIQddQQ"


def state_bytes(state: DetectorState) -> bytes:
    hist = state.encoded_history
    verdicts = bytes(1 if v == ADVERSARIAL else 0 for v in state.verdicts)
    head = struct.pack(_STATE_HEAD, state.num_classes, state.latent_dim, state.t, state.r_cum,
                       state.d_cum, hist.shape[0], len(verdicts))
    return (head + state.class_counts.astype("<i8").tobytes()
            + np.ascontiguousarray(hist, dtype="<f8").tobytes() + verdicts)


def state_from_bytes(data: bytes) -> DetectorState:
    r = _Reader(data, "state")
    c, m, t, r_cum, d_cum, n_hist, n_verdicts = r.unpack(_STATE_HEAD)
    state = DetectorState(c, m)
    state.t, state.r_cum, state.d_cum = t, r_cum, d_cum
    state.class_counts = np.frombuffer(r.take(8 * c), dtype="<i8").astype(np.int64)
    hist = np.frombuffer(r.take(8 * m * n_hist), dtype="<f8").reshape(n_hist, m)
    for z in hist:
        state._append(z.astype(np.float64))
    raw = r.take(n_verdicts)
    if any(b > 1 for b in raw):
        raise FormatError("bad verdict byte", section="state")
    state.verdicts = [ADVERSARIAL if b else BENIGN for b in raw]
    r.done()
    return state


def _check_key(key: bytes) -> bytes:
    if not isinstance(key, (bytes, bytearray)) or len(key) != KEY_BYTES:
        raise DomainError(f"key must be {KEY_BYTES} bytes")
    return bytes(key)


def generate_key() -> bytes:
    return pysodium.randombytes(KEY_BYTES)


def key_from_env(env=KEY_ENV) -> bytes | None:
    """Hex-encoded key from the environment, or None when unset."""
    value = os.environ.get(env)
    if not value:
        return None
    try:
        return _check_key(bytes.fromhex(value.strip()))
    except ValueError:
        raise DomainError(f"{env} must hold {KEY_BYTES} hex-encoded bytes") from None


def seal_state(state: DetectorState, key: bytes) -> bytes:
    """Encrypt and authenticate ``state``; a fresh random nonce per call."""
    key = _check_key(key)
    nonce = pysodium.randombytes(NONCE_BYTES)
    box = pysodium.crypto_secretbox(state_bytes(state), nonce, key)
    return STATE_MAGIC + struct.pack("<H", STATE_VERSION) + nonce + box


def open_state(blob: bytes, key: bytes) -> DetectorState:
    key = _check_key(key)
    head = len(STATE_MAGIC) + 2
    if len(blob) < head + NONCE_BYTES + pysodium.crypto_secretbox_MACBYTES:
        raise FormatError("sealed state is too short", section="header")
    if blob[:4] != STATE_MAGIC:
        raise FormatError("bad magic bytes", section="header")
    (version,) = struct.unpack("<H", blob[4:head])
    if version != STATE_VERSION:
        raise FormatError(f"unsupported state version {version}", section="header")
    nonce = blob[head:head + NONCE_BYTES]
    try:
        plain = pysodium.crypto_secretbox_open(blob[head + NONCE_BYTES:], nonce, key)
    except ValueError:
        raise TamperError("state failed authentication (wrong key or modified file)") from None
    return state_from_bytes(plain)


# -- files and sync -----------------------------------------------------------

def atomic_write(path, data: bytes) -> None:
    """Write to a temporary file beside ``path`` then rename over it."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_state(path, state: DetectorState, key: bytes) -> bytes:
    blob = seal_state(state, key)
    atomic_write(path, blob)
    return blob


def read_state(path, key: bytes) -> DetectorState:
    return open_state(Path(path).read_bytes(), key)


_SYNC_NAME = re.compile(r"^state\.(\d{10})\.sodx$")


def _sync_entries(sync_dir: Path):
    entries = []
    for p in sync_dir.iterdir():
        m = _SYNC_NAME.match(p.name)
        if m:
            entries.append((int(m.group(1)), p))
    return sorted(entries)


def sync_state(blob: bytes, sync_dir) -> Path:
    """Copy a sealed blob into ``sync_dir`` under the next sequence number."""
    sync_dir = Path(sync_dir)
    if not sync_dir.is_dir():
        raise FileNotFoundError(f"sync directory {sync_dir} does not exist")
    entries = _sync_entries(sync_dir)
    seq = entries[-1][0] + 1 if entries else 1
    target = sync_dir / f"state.{seq:010d}.sodx"
    atomic_write(target, blob)
    return target


def recover(sync_dir, key: bytes):
    """Newest synced state that opens with ``key``, as ``(state, path)``; None if none do."""
    sync_dir = Path(sync_dir)
    if not sync_dir.is_dir():
        raise FileNotFoundError(f"sync directory {sync_dir} does not exist")
    for _, p in reversed(_sync_entries(sync_dir)):
        try:
            return open_state(p.read_bytes(), key), p
        except (TamperError, FormatError):
            continue
    return None


class SessionStore:
    """Keeps one session's sealed state on disk, syncing every ``sync_every`` queries.

    :meth:`load` falls back to the sync directory when the local file is
    missing or fails authentication, so deleting the local file does not reset
    the session.
    """

    def __init__(self, path, key: bytes, sync_dir=None, sync_every: int = DEFAULT_SYNC_EVERY):
        if sync_every < 1:
            raise DomainError("sync_every must be at least 1")
        self.path = Path(path)
        self.key = _check_key(key)
        self.sync_dir = Path(sync_dir) if sync_dir is not None else None
        self.sync_every = sync_every

    def save(self, state: DetectorState) -> None:
        blob = write_state(self.path, state, self.key)
        if self.sync_dir is not None and state.t % self.sync_every == 0:
            sync_state(blob, self.sync_dir)

    def load(self) -> DetectorState | None:
        if self.path.exists():
            try:
                return read_state(self.path, self.key)
            except (TamperError, FormatError):
                pass
        if self.sync_dir is not None and self.sync_dir.is_dir():
            found = recover(self.sync_dir, self.key)
            if found is not None:
                return found[0]
        return None
