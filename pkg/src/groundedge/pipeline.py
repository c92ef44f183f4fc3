"""Glue between simulation, feature extraction, disturbance screening and the network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .nn import NetworkModel, WindowDataset, detect_edges, init_model, make_windows, train
from .physics import DisturbanceSeries, estimate_disturbance
from .simulator import fly_mission
from .spectral import FusedFeatureSeries, extract_features
from .telemetry import FlightRecord, align, build_source_vector

ROLE_TRAIN = 1
ROLE_TEST = 2


@dataclass(frozen=True)
class ProcessedFlight:
    record: FlightRecord
    source: np.ndarray
    features: FusedFeatureSeries
    disturbance: DisturbanceSeries

    @property
    def edge_times(self) -> list[float]:
        return [ev.t for ev in self.record.ground_truth]


def flight_seed(base: int, role: int, condition: int, index: int) -> int:
    """Independent 32-bit seed for one flight of an experiment."""
    return int(np.random.SeedSequence([base, role, condition, index]).generate_state(1)[0])


def simulate_flight(config: RunConfig, seed: int, height: float | None = None,
                    angle_deg: float | None = None) -> FlightRecord:
    """One pass with the start position drawn from ``seed``."""
    fc = config.flight
    offset = np.random.default_rng([seed, 7]).uniform(-fc.start_jitter, fc.start_jitter)
    mission = fc.mission(start_x=fc.start_x + offset, height=height, angle_deg=angle_deg)
    return fly_mission(config.scene, config.drone, mission, seed)


def process_record(record: FlightRecord, config: RunConfig) -> ProcessedFlight:
    if not record.is_aligned:
        record = align(record, config.spectral.fs)
    source = build_source_vector(record)
    features = extract_features(source, t0=float(record.imu_t[0]), config=config.spectral)
    disturbance = estimate_disturbance(record, config.drone, config.cfar)
    return ProcessedFlight(record, source, features, disturbance)


def training_flights(config: RunConfig, n: int | None = None) -> list[ProcessedFlight]:
    n = config.eval.n_train if n is None else n
    return [process_record(simulate_flight(config, flight_seed(config.seed, ROLE_TRAIN, 0, i)),
                           config) for i in range(n)]


def build_dataset(flights, config: RunConfig) -> WindowDataset:
    return WindowDataset.concat([
        make_windows(f.features, f.disturbance, f.edge_times, config.nn.window,
                     config.nn.train_stride, flight=i) for i, f in enumerate(flights)])


def train_model(dataset: WindowDataset, config: RunConfig, lam: float | None = None,
                epochs: int | None = None, target_accuracy: float | None = None):
    nc = config.nn
    model = init_model(seed=nc.seed, lam=nc.lam if lam is None else lam, window=nc.window,
                       channels=3, log_input=nc.log_input)
    return train(model, dataset, epochs=nc.epochs if epochs is None else epochs,
                 batch_size=nc.batch_size, lr=nc.lr, seed=nc.seed, momentum=nc.momentum,
                 target_accuracy=target_accuracy)


def pipeline_detect(model: NetworkModel, flight: ProcessedFlight, config: RunConfig) -> list[float]:
    return detect_edges(model, flight.features, stride=config.nn.infer_stride,
                        disturbance=flight.disturbance if config.eval.gate else None,
                        gate_window=config.eval.gate_window)
