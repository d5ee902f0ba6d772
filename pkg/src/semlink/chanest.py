"""Pilot-based channel estimation: per-pilot least squares plus bilinear
interpolation to the full resource grid, and the NMSE metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ofdm import OfdmConfig, PrbGrid, pilot_positions, pilot_symbols


@dataclass
class PilotObservation:
    """Received and known pilot values on the (subcarrier, symbol) lattice."""

    pilot_rx: np.ndarray        # (n_pf, n_pt) complex
    pilot_tx: np.ndarray        # (n_pf, n_pt) complex, unit modulus
    freq_positions: np.ndarray  # (n_pf,)
    time_positions: np.ndarray  # (n_pt,)


@dataclass
class CsiGrid:
    """Full-grid channel state, estimate or truth."""

    H: np.ndarray  # (N_f, N_t) complex

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=complex)
        if not np.all(np.isfinite(self.H)):
            raise ValueError("CSI grid must be finite")


def observe_pilots(grid: PrbGrid, cfg: OfdmConfig) -> PilotObservation:
    """Collect the received pilot cells and regenerate the known pilot values."""
    pf, pt = pilot_positions(cfg)
    return PilotObservation(grid.cells[np.ix_(pf, pt)], pilot_symbols(cfg), pf, pt)


def ls_estimate(obs: PilotObservation) -> np.ndarray:
    """Per-pilot least-squares estimate: received divided by known pilot."""
    if np.any(obs.pilot_tx == 0):
        raise ValueError("pilot symbols must be nonzero")
    return obs.pilot_rx / obs.pilot_tx


def interpolate_grid(pilot_estimates: np.ndarray,
                     positions: tuple[np.ndarray, np.ndarray],
                     cfg: OfdmConfig) -> CsiGrid:
    """Bilinear interpolation of lattice estimates to every grid cell.

    Interpolates along frequency first, then time; cells beyond the last
    pilot row or column hold the nearest pilot value (constant extrapolation).
    """
    freq_pos, time_pos = (np.asarray(p) for p in positions)
    est = np.asarray(pilot_estimates, dtype=complex)
    if freq_pos.size < 2 or time_pos.size < 1:
        raise ValueError("degenerate pilot lattice")
    if est.shape != (freq_pos.size, time_pos.size):
        raise ValueError("estimate block does not match the lattice")

    rows = np.arange(cfg.n_subcarriers)
    along_f = np.empty((cfg.n_subcarriers, time_pos.size), dtype=complex)
    for j in range(time_pos.size):
        along_f[:, j] = (np.interp(rows, freq_pos, est[:, j].real)
                         + 1j * np.interp(rows, freq_pos, est[:, j].imag))

    if time_pos.size == 1:
        full = np.repeat(along_f, cfg.n_symbols, axis=1)
        return CsiGrid(full)

    cols = np.arange(cfg.n_symbols)
    right = np.searchsorted(time_pos, cols, side="left").clip(1, time_pos.size - 1)
    left = right - 1
    span = (time_pos[right] - time_pos[left]).astype(float)
    w = np.clip((cols - time_pos[left]) / span, 0.0, 1.0)
    full = along_f[:, left] * (1.0 - w)[None, :] + along_f[:, right] * w[None, :]
    return CsiGrid(full)


def nmse(h_hat: np.ndarray, h_true: np.ndarray) -> float:
    """Frobenius-normalized squared estimation error."""
    h_hat = np.asarray(h_hat)
    h_true = np.asarray(h_true)
    if h_hat.shape != h_true.shape:
        raise ValueError("shapes differ")
    denom = np.linalg.norm(h_true) ** 2
    if denom == 0:
        raise ValueError("zero-norm reference")
    return float(np.linalg.norm(h_hat - h_true) ** 2 / denom)


def rough_csi_vector(grid: CsiGrid) -> np.ndarray:
    """Collapse a full-grid estimate to one per-subcarrier vector.

    Valid under block fading, where the true response is constant across
    symbols; averaging over the symbol axis keeps the noise-reduction the
    pilot columns provide.
    """
    return grid.H.mean(axis=1)
