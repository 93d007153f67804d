"""Desk-scale separation task: FM-modulated synthetic voice against OFDM interference.

Used by the learning-signal and separation-ordering checks and by the CLI
``generate`` defaults. Everything is derived from integer seeds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .mixing import (
    DatasetSpec,
    MixtureExample,
    build_dataset,
    mix_at_sinr,
    pool_band,
    prepare_interference_pool,
    prepare_soi_pool,
)
from .signal_core import (
    FrequencyBand,
    IqSignal,
    design_lowpass,
    filter_signal,
    frequency_shift,
    resample_to,
    unit_normalize,
)
from .waveforms import AudioSignal, FmConfig, OfdmConfig, fm_modulate, ofdm_generate, speech_like_audio


@dataclass(frozen=True)
class ToyTask:
    slice_length: int = 2048
    fm: FmConfig = FmConfig()
    ofdm: OfdmConfig = OfdmConfig()
    shift_step_hz: float = 60000.0
    soi_seconds: float = 30.0
    interference_seconds: float = 4.0

    @property
    def fs(self) -> float:
        return self.fm.rf_rate_hz

    def ofdm_config(self, seed: int, seconds: float) -> OfdmConfig:
        n_sym = int(math.ceil(seconds * self.ofdm.sample_rate_hz / self.ofdm.symbol_length))
        return OfdmConfig(
            fft_size=self.ofdm.fft_size,
            num_active_subcarriers=self.ofdm.num_active_subcarriers,
            cp_length=self.ofdm.cp_length,
            subcarrier_spacing_hz=self.ofdm.subcarrier_spacing_hz,
            qam_order=self.ofdm.qam_order,
            num_symbols=n_sym,
            seed=seed,
        )

    def soi_audio(self, seed: int, seconds: Optional[float] = None) -> AudioSignal:
        return speech_like_audio(seconds or self.soi_seconds, self.fm.audio_rate_hz, seed=seed)

    def soi_stream(self, seed: int, seconds: Optional[float] = None) -> Tuple[AudioSignal, IqSignal]:
        audio = self.soi_audio(seed, seconds)
        return audio, fm_modulate(audio, self.fm)

    def interference_raw(self, seed: int, seconds: Optional[float] = None) -> IqSignal:
        return ofdm_generate(self.ofdm_config(seed, seconds or self.interference_seconds))[0]

    def pools(self, seed: int) -> Tuple[List[IqSignal], List[IqSignal]]:
        _, soi = self.soi_stream(seed)
        spec = DatasetSpec(slice_length=self.slice_length, shift_step_hz=self.shift_step_hz)
        raw = self.interference_raw(seed + 1)
        interf = prepare_interference_pool(raw, spec, self.fs, occupied_bw_hz=self.ofdm.occupied_bandwidth_hz)
        return prepare_soi_pool(soi, self.slice_length), interf

    def dataset(
        self,
        count: int,
        sinr_range_db: Tuple[float, float],
        seed: int = 0,
        split: Tuple[float, float] = (0.9, 0.1),
        soi_band: Optional[FrequencyBand] = None,
    ) -> Tuple[List[MixtureExample], List[MixtureExample], FrequencyBand]:
        soi_pool, interf_pool = self.pools(seed)
        band = soi_band or pool_band(soi_pool)
        spec = DatasetSpec(
            slice_length=self.slice_length,
            sinr_range_db=sinr_range_db,
            count=count,
            shift_step_hz=self.shift_step_hz,
            split=split,
            seed=seed,
        )
        train, val = build_dataset(soi_pool, interf_pool, spec, band)
        return train, val, band

    def interference_stream(self, n: int, seed: int, shift_hz: float = 0.0) -> IqSignal:
        """A continuous unit-RMS interference stream of ``n`` samples at the task rate."""
        seconds = n / self.fs + 0.05
        raw = self.interference_raw(seed, seconds)
        y = frequency_shift(raw, -shift_hz) if shift_hz else raw
        y = filter_signal(y, design_lowpass(0.45 * self.fs, raw.sample_rate_hz, 257))
        y = resample_to(y, self.fs)
        return unit_normalize(y.with_samples(y.samples[:n]))

    def held_out_mixture(
        self, sinr_db: float, band: FrequencyBand, seconds: float = 3.0, seed: int = 10_000
    ) -> Tuple[AudioSignal, MixtureExample]:
        """Long test stream (audio truth plus its RF mixture), disjoint seeds from training."""
        audio, soi = self.soi_stream(seed, seconds)
        b = self.interference_stream(len(soi), seed + 1, shift_hz=self.shift_step_hz / 2)
        return audio, mix_at_sinr(soi, b, sinr_db, band, seed=seed)
