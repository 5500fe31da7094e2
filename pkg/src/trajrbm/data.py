"""Binary datasets: file formats, train/test splitting and synthetic generators."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, gammaln, logsumexp

from .core import Convention, FormatError, convert_states

PACKED_MAGIC = b"BDS1"
TRAIN, TEST = 0, 1


@dataclass
class BinaryDataset:
    """Row-major binary matrix with optional labels and split assignment.

    ``split`` holds 0 for training rows and 1 for test rows; ``None`` means
    every row is a training row.
    """

    data: np.ndarray
    labels: list[str] | None = None
    convention: Convention = Convention.ZERO_ONE
    split: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.convention = Convention.parse(self.convention)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("dataset must be a 2-D matrix")
        allowed = (0.0, 1.0) if self.convention is Convention.ZERO_ONE else (-1.0, 1.0)
        if not np.all(np.isin(self.data, allowed)):
            raise ValueError(f"entries must be in {allowed} for {self.convention.value}")
        if self.labels is not None and len(self.labels) != len(self.data):
            raise ValueError("one label per row required")

    def __len__(self):
        return self.data.shape[0]

    @property
    def num_visible(self) -> int:
        return self.data.shape[1]

    def as_convention(self, convention) -> "BinaryDataset":
        convention = Convention.parse(convention)
        return replace(self, data=convert_states(self.data, self.convention, convention),
                       convention=convention)

    @property
    def train(self) -> np.ndarray:
        return self.data if self.split is None else self.data[self.split == TRAIN]

    @property
    def test(self) -> np.ndarray:
        if self.split is None:
            return self.data[:0]
        return self.data[self.split == TEST]

    def bits(self) -> np.ndarray:
        return convert_states(self.data, self.convention, Convention.ZERO_ONE).astype(np.uint8)


# --- file formats -----------------------------------------------------------

def _parse_text(text: str, convention=None) -> BinaryDataset:
    rows, labels, meta = [], [], {}
    width = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, val = tok.split("=", 1)
                    meta[k] = val
            continue
        label = None
        if "|" in line:
            line, label = line.split("|", 1)
            label = label.strip()
        tokens = line.split()
        bad = [t for t in tokens if t not in ("0", "1")]
        if bad:
            raise FormatError(f"line {lineno}: invalid token {bad[0]!r}")
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise FormatError(f"line {lineno}: ragged row with {len(tokens)} entries, expected {width}")
        rows.append([int(t) for t in tokens])
        labels.append(label)
    if not rows:
        raise FormatError("empty dataset")
    conv = Convention.parse(convention or meta.pop("convention", Convention.ZERO_ONE))
    meta.pop("convention", None)
    bits = np.array(rows, dtype=np.float64)
    has_labels = any(lab is not None for lab in labels)
    return BinaryDataset(
        convert_states(bits, Convention.ZERO_ONE, conv),
        labels=[lab or "" for lab in labels] if has_labels else None,
        convention=conv,
        meta=meta,
    )


def _format_text(ds: BinaryDataset) -> str:
    lines = [f"# convention={ds.convention.value}"]
    lines += [f"# {k}={v}" for k, v in sorted(ds.meta.items())]
    for i, row in enumerate(ds.bits()):
        line = " ".join("1" if b else "0" for b in row)
        if ds.labels is not None:
            line += f" | {ds.labels[i]}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def _pack(ds: BinaryDataset) -> bytes:
    bits = ds.bits()
    return PACKED_MAGIC + struct.pack("<QQ", *bits.shape) + np.packbits(bits, axis=1).tobytes()


def _unpack(payload: bytes, convention=None) -> BinaryDataset:
    if payload[:4] != PACKED_MAGIC:
        raise FormatError(f"bad magic {payload[:4]!r}, expected {PACKED_MAGIC!r}")
    if len(payload) < 20:
        raise FormatError("truncated packed header")
    m, nv = struct.unpack("<QQ", payload[4:20])
    row_bytes = (nv + 7) // 8
    body = payload[20:]
    if len(body) < m * row_bytes:
        raise FormatError(f"truncated packed payload: {len(body)} of {m * row_bytes} bytes")
    packed = np.frombuffer(body[: m * row_bytes], dtype=np.uint8).reshape(m, row_bytes)
    bits = np.unpackbits(packed, axis=1)[:, :nv].astype(np.float64)
    conv = Convention.parse(convention or Convention.ZERO_ONE)
    return BinaryDataset(convert_states(bits, Convention.ZERO_ONE, conv), convention=conv)


def _infer_format(path: Path) -> str:
    with open(path, "rb") as fh:
        return "packed-bits" if fh.read(4) == PACKED_MAGIC else "text-01"


def load_dataset(path, format: str | None = None, convention=None) -> BinaryDataset:
    """Read a ``text-01`` or ``packed-bits`` file.

    Text files hold one sample per line as whitespace-separated 0/1 tokens,
    optionally followed by ``| label``; lines starting with ``#`` carry
    ``key=value`` metadata (notably ``convention``).
    """
    path = Path(path)
    format = format or _infer_format(path)
    if format == "text-01":
        return _parse_text(path.read_text(), convention)
    if format == "packed-bits":
        return _unpack(path.read_bytes(), convention)
    raise ValueError(f"unknown dataset format {format!r}")


def save_dataset(path, ds: BinaryDataset, format: str = "text-01") -> None:
    path = Path(path)
    if format == "text-01":
        path.write_text(_format_text(ds))
    elif format == "packed-bits":
        path.write_bytes(_pack(ds))
    else:
        raise ValueError(f"unknown dataset format {format!r}")


def split(ds: BinaryDataset, train_fraction: float = 0.6, seed=0) -> BinaryDataset:
    """Uniform random train/test assignment, deterministic per seed."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    m = len(ds)
    n_train = int(round(train_fraction * m))
    if n_train == 0 or n_train == m:
        raise ValueError(f"split of {m} rows at {train_fraction} leaves an empty side")
    rng = np.random.default_rng(seed)
    assign = np.full(m, TEST, dtype=np.int8)
    assign[rng.permutation(m)[:n_train]] = TRAIN
    return replace(ds, split=assign)


# --- generators -------------------------------------------------------------

def ising_energy(spins: np.ndarray, L: int) -> np.ndarray:
    """E = -sum_i s_i (s_right + s_down) on an L x L periodic lattice."""
    s = spins.reshape(-1, L, L)
    return -(s * np.roll(s, -1, axis=2) + s * np.roll(s, -1, axis=1)).sum(axis=(1, 2))


def _neighbor_table(L: int) -> np.ndarray:
    r, c = np.divmod(np.arange(L * L), L)
    return np.stack([((r - 1) % L) * L + c, ((r + 1) % L) * L + c,
                     r * L + (c - 1) % L, r * L + (c + 1) % L], axis=1)


def metropolis_flip_probability(spin, neighbor_sum, beta):
    """Acceptance probability of flipping ``spin`` given its neighbor sum."""
    return np.minimum(1.0, np.exp(-2.0 * beta * spin * neighbor_sum))


def ising_sweep(s: np.ndarray, L: int, beta: float, rng) -> None:
    """One random-scan Metropolis sweep (L**2 single-site updates), in place.

    Each chain draws its own site at every update. A fixed sequential scan
    is not used because its kernel is reducible on small lattices.
    """
    n, rows = L * L, np.arange(s.shape[0])
    table = _neighbor_table(L)
    for _ in range(n):
        site = rng.integers(0, n, s.shape[0])
        nb = s[rows[:, None], table[site]].sum(axis=1)
        spin = s[rows, site]
        flip = rng.random(s.shape[0]) < metropolis_flip_probability(spin, nb, beta)
        s[rows[flip], site[flip]] = -spin[flip]


def gen_ising2d(L: int, beta: float, count: int, thermalization_sweeps: int = 1000,
                seed=0, stride: int | None = None, chains: int | None = None) -> BinaryDataset:
    """Equilibrium configurations of the 2-D ferromagnetic Ising model.

    Independent chains start from random spins, run ``thermalization_sweeps``
    sweeps, then emit one sample every ``stride`` (default L**2) sweeps.
    """
    if L < 2:
        raise ValueError("L must be at least 2")
    stride = max(L * L, stride or L * L)
    rng = np.random.default_rng(seed)
    chains = chains or min(count, 1000)
    per_chain = -(-count // chains)
    s = np.where(rng.random((chains, L * L)) < 0.5, 1.0, -1.0)
    for _ in range(thermalization_sweeps):
        ising_sweep(s, L, beta, rng)
    out = []
    for i in range(per_chain):
        if i:
            for _ in range(stride):
                ising_sweep(s, L, beta, rng)
        out.append(s.copy())
    samples = np.concatenate(out)[:count]
    return BinaryDataset(samples, convention=Convention.PLUS_MINUS,
                         meta={"source": "ising2d", "L": L, "beta": beta})


def curie_weiss_magnetization_law(N: int, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Enumerated law of the total magnetization M = 2k - N.

    p(M) is proportional to C(N, k) exp(beta M^2 / (2N)).
    """
    k = np.arange(N + 1)
    M = 2 * k - N
    logp = gammaln(N + 1) - gammaln(k + 1) - gammaln(N - k + 1) + beta * M**2 / (2.0 * N)
    return M, np.exp(logp - logsumexp(logp))


def gen_curie_weiss(N: int, beta: float, count: int, seed=0) -> BinaryDataset:
    """Exact Curie-Weiss samples via the magnetization decomposition."""
    if N < 2:
        raise ValueError("N must be at least 2")
    rng = np.random.default_rng(seed)
    M, p = curie_weiss_magnetization_law(N, beta)
    ups = (M[rng.choice(len(p), size=count, p=p)] + N) // 2
    spins = -np.ones((count, N))
    for row, k in enumerate(ups):
        spins[row, rng.permutation(N)[:k]] = 1.0
    return BinaryDataset(spins, convention=Convention.PLUS_MINUS,
                         meta={"source": "curie_weiss", "N": N, "beta": beta})


@dataclass(frozen=True)
class Cluster:
    center: tuple
    weight: float
    radius: float


def mickey_spec() -> list[Cluster]:
    """Face plus two ears in the latent plane."""
    return [
        Cluster((0.0, -0.15), 0.6, 0.18),
        Cluster((-0.42, 0.42), 0.2, 0.08),
        Cluster((0.42, 0.42), 0.2, 0.08),
    ]


def gen_clustered(spec, count: int, Nv: int, seed=0, gain: float = 1.0,
                  convention=Convention.ZERO_ONE) -> BinaryDataset:
    """Planted clusters in a low-dimensional latent space lifted to Nv spins.

    Latent points ``z = center + radius * g`` (g standard normal) are mapped
    to fields ``gain * sqrt(Nv) * E z`` through a random orthonormal
    embedding ``E`` (Nv x d); spins are drawn with p(s = +1) = sigmoid(2 field).
    Labels record the cluster index.
    """
    spec = [c if isinstance(c, Cluster) else Cluster(*c) for c in spec]
    weights = np.array([c.weight for c in spec], dtype=np.float64)
    if not np.isclose(weights.sum(), 1.0, atol=1e-9):
        raise ValueError(f"cluster weights sum to {weights.sum()}, expected 1")
    centers = np.array([np.atleast_1d(c.center) for c in spec], dtype=np.float64)
    d = centers.shape[1]
    rng = np.random.default_rng(seed)
    embed, _ = np.linalg.qr(rng.standard_normal((Nv, d)))
    which = rng.choice(len(spec), size=count, p=weights)
    radii = np.array([c.radius for c in spec])
    z = centers[which] + radii[which, None] * rng.standard_normal((count, d))
    fields = gain * np.sqrt(Nv) * z @ embed.T
    spins = np.where(rng.random((count, Nv)) < expit(2.0 * fields), 1.0, -1.0)
    ds = BinaryDataset(spins, labels=[str(i) for i in which], convention=Convention.PLUS_MINUS,
                       meta={"source": "clustered", "d": d})
    return ds.as_convention(convention)
