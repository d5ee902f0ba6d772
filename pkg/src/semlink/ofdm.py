"""Bit-exact OFDM transmit/receive chain over a tapped-delay fading channel.

Conventions fixed here so every energy check is unambiguous:
unitary FFT/IFFT (1/sqrt(N) both ways), SNR defined on received time-domain
samples, one block-fading channel realization per resource block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

# Extended Pedestrian A power/delay profile (3GPP low-mobility reference).
EPA_DELAYS_NS = np.array([0, 30, 70, 90, 110, 190, 410], dtype=float)
EPA_POWERS_DB = np.array([0.0, -1.0, -2.0, -3.0, -8.0, -17.2, -20.8])

# 15 kHz subcarrier spacing times 1024 carriers.
DEFAULT_SAMPLE_RATE_HZ = 15.36e6

EQUALIZER_FLOOR = 1e-3


@dataclass(frozen=True)
class OfdmConfig:
    n_subcarriers: int = 1024
    n_symbols: int = 14
    cp_len: int = 256
    pilot_freq_interval: int = 9
    pilot_time_interval: int = 5
    qam_order: int = 4
    pilot_seed: int = 2025

    def __post_init__(self):
        if self.cp_len >= self.n_subcarriers:
            raise ValueError("cp_len must be shorter than the symbol")
        if self.pilot_freq_interval < 1 or self.pilot_time_interval < 1:
            raise ValueError("pilot intervals must be >= 1")
        if self.qam_order != 4:
            raise ValueError("only 4-QAM is supported")

    @property
    def samples_per_symbol(self) -> int:
        return self.n_subcarriers + self.cp_len

    @property
    def n_samples(self) -> int:
        return self.n_symbols * self.samples_per_symbol


def pilot_positions(cfg: OfdmConfig) -> tuple[np.ndarray, np.ndarray]:
    """Uniform pilot lattice coordinates (subcarrier rows, symbol columns)."""
    return (np.arange(0, cfg.n_subcarriers, cfg.pilot_freq_interval),
            np.arange(0, cfg.n_symbols, cfg.pilot_time_interval))


def pilot_mask(cfg: OfdmConfig) -> np.ndarray:
    mask = np.zeros((cfg.n_subcarriers, cfg.n_symbols), dtype=bool)
    pf, pt = pilot_positions(cfg)
    mask[np.ix_(pf, pt)] = True
    return mask


def pilot_symbols(cfg: OfdmConfig) -> np.ndarray:
    """Seeded pseudo-random unit-modulus 4-QAM pilot values, shape (n_pf, n_pt)."""
    pf, pt = pilot_positions(cfg)
    rng = np.random.default_rng(cfg.pilot_seed)
    bits = rng.integers(0, 2, size=2 * pf.size * pt.size)
    syms, _ = qam4_modulate(bits)
    return syms.reshape(pf.size, pt.size)


def data_capacity(cfg: OfdmConfig) -> int:
    pf, pt = pilot_positions(cfg)
    return cfg.n_subcarriers * cfg.n_symbols - pf.size * pt.size


@dataclass
class BitStream:
    """Bit payload plus the framing needed to invert it exactly."""

    bits: np.ndarray
    bits_per_index: int
    pad_bits: int = 0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.size and not np.isin(self.bits, (0, 1)).all():
            raise ValueError("bits must be 0/1")


def bits_per_index(k: int) -> int:
    if k < 2:
        raise ValueError("codebook size must be at least 2")
    return int(np.ceil(np.log2(k)))


def indices_to_bits(indices: np.ndarray, k: int) -> BitStream:
    """Fixed-width big-endian binary expansion of each index."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= k):
        raise ValueError("index out of range")
    width = bits_per_index(k)
    shifts = np.arange(width - 1, -1, -1)
    bits = ((indices[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    return BitStream(bits, width)


def bits_to_indices(stream: BitStream, k: int) -> np.ndarray:
    """Invert indices_to_bits; corrupted words above k-1 clamp to k-1."""
    width = bits_per_index(k)
    bits = stream.bits
    if stream.pad_bits:
        bits = bits[: bits.size - stream.pad_bits]
    if bits.size % width:
        raise ValueError(f"bit count {bits.size} is not a multiple of width {width}")
    words = bits.reshape(-1, width).astype(np.int64)
    vals = words @ (1 << np.arange(width - 1, -1, -1))
    return np.minimum(vals, k - 1)


# Gray-mapped 4-QAM: first bit selects the real sign, second the imaginary
# sign, so adjacent constellation points differ in exactly one bit.
_QAM_SCALE = 1.0 / np.sqrt(2.0)


def qam4_modulate(bits: np.ndarray) -> tuple[np.ndarray, int]:
    """Map a bit sequence to unit-energy 4-QAM symbols.

    Returns (symbols, pad), where pad is the number of zero bits appended to
    reach an even count; callers keep it to trim after demodulation.
    """
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    pad = bits.size % 2
    if pad:
        bits = np.concatenate([bits, np.zeros(1, dtype=np.uint8)])
    pairs = bits.reshape(-1, 2)
    re = 1.0 - 2.0 * pairs[:, 0]
    im = 1.0 - 2.0 * pairs[:, 1]
    return _QAM_SCALE * (re + 1j * im), pad


def qam4_demodulate(symbols: np.ndarray, n_bits: int | None = None) -> np.ndarray:
    """Per-axis sign decision; optionally trim to the original bit count."""
    symbols = np.asarray(symbols)
    bits = np.empty((symbols.size, 2), dtype=np.uint8)
    bits[:, 0] = symbols.real < 0
    bits[:, 1] = symbols.imag < 0
    out = bits.reshape(-1)
    return out[:n_bits] if n_bits is not None else out


@dataclass
class PrbGrid:
    """One time-frequency resource block: pilot lattice plus payload cells."""

    cells: np.ndarray       # (N_f, N_t) complex
    pilot_mask: np.ndarray  # (N_f, N_t) bool
    n_data: int | None = None  # payload symbols actually filled


def _data_fill_order(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # frequency-first: subcarrier index varies fastest within each symbol
    tt, ff = np.nonzero(~mask.T)
    return ff, tt


def build_grid(data_symbols: np.ndarray, cfg: OfdmConfig) -> PrbGrid:
    """Place pilots on the lattice and payload in the remaining cells.

    Unfilled data cells stay zero; the fill count is retained on the grid so
    the payload can be recovered exactly.
    """
    data_symbols = np.asarray(data_symbols, dtype=complex).reshape(-1)
    mask = pilot_mask(cfg)
    cap = data_capacity(cfg)
    if data_symbols.size > cap:
        raise ValueError(
            f"payload of {data_symbols.size} symbols exceeds data capacity {cap}")
    cells = np.zeros((cfg.n_subcarriers, cfg.n_symbols), dtype=complex)
    pf, pt = pilot_positions(cfg)
    cells[np.ix_(pf, pt)] = pilot_symbols(cfg)
    ff, tt = _data_fill_order(mask)
    n = data_symbols.size
    cells[ff[:n], tt[:n]] = data_symbols
    return PrbGrid(cells, mask, n_data=n)


def extract_data(grid: PrbGrid, n: int | None = None) -> np.ndarray:
    """Read payload cells back in fill order."""
    if n is None:
        n = grid.n_data
    if n is None:
        raise ValueError("payload length unknown; pass n explicitly")
    ff, tt = _data_fill_order(grid.pilot_mask)
    return grid.cells[ff[:n], tt[:n]]


def ofdm_modulate(grid: PrbGrid, cfg: OfdmConfig) -> np.ndarray:
    """Unitary IDFT per symbol with cyclic prefix, symbols concatenated in time."""
    if grid.cells.shape != (cfg.n_subcarriers, cfg.n_symbols):
        raise ValueError("grid shape does not match config")
    x = np.fft.ifft(grid.cells, axis=0, norm="ortho")
    with_cp = np.concatenate([x[-cfg.cp_len:, :], x], axis=0)
    return with_cp.T.reshape(-1)


def ofdm_demodulate(samples: np.ndarray, cfg: OfdmConfig) -> PrbGrid:
    """Strip cyclic prefixes and apply the unitary DFT per symbol."""
    samples = np.asarray(samples, dtype=complex).reshape(-1)
    if samples.size != cfg.n_samples:
        raise ValueError(
            f"expected {cfg.n_samples} samples, got {samples.size}")
    blocks = samples.reshape(cfg.n_symbols, cfg.samples_per_symbol)[:, cfg.cp_len:]
    cells = np.fft.fft(blocks, axis=1, norm="ortho").T
    return PrbGrid(cells, pilot_mask(cfg), n_data=None)


@dataclass
class ChannelRealization:
    """Sample-spaced multipath taps and their per-subcarrier frequency response."""

    taps: np.ndarray                # (L,) complex gains
    tap_delays_samples: np.ndarray  # (L,) ints
    freq_response: np.ndarray       # (N_f,) complex
    power_profile_db: np.ndarray    # (L,)


def freq_response_of(taps: np.ndarray, delays: np.ndarray, n_subcarriers: int) -> np.ndarray:
    k = np.arange(n_subcarriers)
    phase = np.exp(-2j * np.pi * np.outer(k, delays) / n_subcarriers)
    return phase @ np.asarray(taps, dtype=complex)


def channel_from_taps(taps, delays, cfg: OfdmConfig,
                      power_profile_db=None) -> ChannelRealization:
    taps = np.asarray(taps, dtype=complex)
    delays = np.asarray(delays, dtype=int)
    if power_profile_db is None:
        power_profile_db = 10.0 * np.log10(np.maximum(np.abs(taps) ** 2, 1e-300))
    return ChannelRealization(taps, delays,
                              freq_response_of(taps, delays, cfg.n_subcarriers),
                              np.asarray(power_profile_db, dtype=float))


def identity_channel(cfg: OfdmConfig) -> ChannelRealization:
    return channel_from_taps([1.0 + 0j], [0], cfg, power_profile_db=[0.0])


def sample_epa_channel(cfg: OfdmConfig, rng: np.random.Generator,
                       sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ) -> ChannelRealization:
    """Draw one block-fading EPA realization with sample-spaced taps.

    Path delays round to the nearest sample; coincident paths sum. Linear
    path powers are normalized to unit total so E[sum |tap|^2] = 1.
    """
    delays = np.rint(EPA_DELAYS_NS * 1e-9 * sample_rate_hz).astype(int)
    powers = 10.0 ** (EPA_POWERS_DB / 10.0)
    powers = powers / powers.sum()
    gains = np.sqrt(powers / 2.0) * (rng.standard_normal(powers.size)
                                     + 1j * rng.standard_normal(powers.size))
    uniq = np.unique(delays)
    taps = np.zeros(uniq.size, dtype=complex)
    merged_power = np.zeros(uniq.size)
    for i, dly in enumerate(uniq):
        sel = delays == dly
        taps[i] = gains[sel].sum()
        merged_power[i] = powers[sel].sum()
    if uniq.max() >= cfg.cp_len:
        raise ValueError(
            f"max tap delay {uniq.max()} samples reaches the cyclic prefix ({cfg.cp_len})")
    return ChannelRealization(taps, uniq,
                              freq_response_of(taps, uniq, cfg.n_subcarriers),
                              10.0 * np.log10(merged_power))


def apply_channel(samples: np.ndarray, ch: ChannelRealization, snr_db: float,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Linear tap convolution plus complex white noise at the requested SNR.

    Noise power is set against the measured post-channel signal power, so
    the realized SNR matches the request. snr_db = inf disables noise.
    """
    samples = np.asarray(samples, dtype=complex).reshape(-1)
    h = np.zeros(int(ch.tap_delays_samples.max()) + 1, dtype=complex)
    h[ch.tap_delays_samples] = ch.taps
    out = np.convolve(samples, h)[: samples.size]
    if np.isinf(snr_db):
        return out
    if rng is None:
        raise ValueError("finite snr needs an rng")
    p_sig = np.mean(np.abs(out) ** 2)
    sigma2 = p_sig / (10.0 ** (snr_db / 10.0))
    noise = np.sqrt(sigma2 / 2.0) * (rng.standard_normal(out.size)
                                     + 1j * rng.standard_normal(out.size))
    return out + noise


def zf_equalize(grid: PrbGrid, h_hat: np.ndarray, n_data: int | None = None,
                floor: float = EQUALIZER_FLOOR) -> np.ndarray:
    """Per-cell zero-forcing division, returning payload symbols in fill order.

    Divisors below the magnitude floor are clamped to floor * phase so deep
    fades cannot blow up the output.
    """
    h = np.asarray(h_hat, dtype=complex)
    if h.ndim == 1:
        h = np.broadcast_to(h[:, None], grid.cells.shape)
    if h.shape != grid.cells.shape:
        raise ValueError("channel estimate shape does not match the grid")
    mag = np.abs(h)
    phase = np.where(mag > 0, h / np.where(mag > 0, mag, 1.0), 1.0)
    safe = np.where(mag < floor, floor * phase, h)
    eq = grid.cells / safe
    ff, tt = _data_fill_order(grid.pilot_mask)
    n = grid.n_data if n_data is None else n_data
    if n is None:
        n = ff.size
    return eq[ff[:n], tt[:n]]


@dataclass
class ChannelRecord:
    """One dataset entry: optional taps plus a per-subcarrier response."""

    taps: np.ndarray
    tap_delays_samples: np.ndarray
    freq_response: np.ndarray


def save_channel_dataset(path, records: list[ChannelRecord], n_subcarriers: int) -> None:
    """Serialize channel records ("CHD1"): u16 tap count, taps, response."""
    with open(path, "wb") as f:
        f.write(b"CHD1")
        f.write(struct.pack("<II", len(records), n_subcarriers))
        for rec in records:
            taps = np.asarray(rec.taps, dtype=complex)
            delays = np.asarray(rec.tap_delays_samples, dtype=np.uint16)
            freq = np.asarray(rec.freq_response, dtype=complex)
            if freq.size != n_subcarriers:
                raise ValueError("record response length mismatch")
            f.write(struct.pack("<H", taps.size))
            for dly, tap in zip(delays, taps):
                f.write(struct.pack("<Hff", int(dly), float(tap.real), float(tap.imag)))
            inter = np.empty(2 * freq.size, dtype="<f4")
            inter[0::2] = freq.real
            inter[1::2] = freq.imag
            f.write(inter.tobytes())


def load_channel_dataset(path) -> tuple[int, list[ChannelRecord]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"CHD1":
            raise ValueError(f"bad channel dataset magic {magic!r}")
        count, n_f = struct.unpack("<II", f.read(8))
        records = []
        for _ in range(count):
            (n_taps,) = struct.unpack("<H", f.read(2))
            delays = np.zeros(n_taps, dtype=int)
            taps = np.zeros(n_taps, dtype=complex)
            for i in range(n_taps):
                dly, re, im = struct.unpack("<Hff", f.read(10))
                delays[i] = dly
                taps[i] = re + 1j * im
            inter = np.frombuffer(f.read(8 * n_f), dtype="<f4")
            freq = inter[0::2].astype(float) + 1j * inter[1::2].astype(float)
            records.append(ChannelRecord(taps, delays, freq))
    return n_f, records


def save_csi_pairs(path, truths: list[ChannelRealization],
                   roughs: list[np.ndarray], n_subcarriers: int) -> None:
    """Store (true channel, rough estimate) training pairs as adjacent records.

    Even records carry the true channel with its taps; odd records carry the
    rough per-subcarrier estimate with an empty tap list.
    """
    records = []
    for truth, rough in zip(truths, roughs, strict=True):
        records.append(ChannelRecord(truth.taps, truth.tap_delays_samples,
                                     truth.freq_response))
        records.append(ChannelRecord(np.zeros(0, dtype=complex),
                                     np.zeros(0, dtype=int),
                                     np.asarray(rough, dtype=complex)))
    save_channel_dataset(path, records, n_subcarriers)


def load_csi_pairs(path) -> tuple[int, np.ndarray, np.ndarray]:
    """Inverse of save_csi_pairs: (n_subcarriers, truths, roughs) as arrays."""
    n_f, records = load_channel_dataset(path)
    if len(records) % 2:
        raise ValueError("pair dataset must hold an even record count")
    truths = np.stack([r.freq_response for r in records[0::2]])
    roughs = np.stack([r.freq_response for r in records[1::2]])
    return n_f, truths, roughs
