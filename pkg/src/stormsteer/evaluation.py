"""Per-event intervention runs and their scoring.

``intervene_event`` produces the standard forecast of X^{t+1} and one
perturbation per method.  ``evaluate_event`` rolls every perturbed state to
the event time with a shared noise draw and scores it against the standard
forecast, the reanalysis latents and the half-step transfer model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adversarial import AttackConfig, pgd_attack
from .catalog import EventRecord
from .diffusion import DenoiserParams, NoiseSchedule, forecast_noise, reconstruct, run_sampler
from .fields import AtmosphericState
from .guidance import GuidanceConfig, Perturbation, guided_sample, lambda_scale_probe
from .metrics import (fss, latent_deviation, nontarget_scores, perturbation_profile, reduction_ratio,
                      region_mean, success_rate, cells_mask)
from .transfer import TransferParams, transfer_rollout

PGD_LABEL = "AOWF"
FSS_WINDOWS = (1, 3, 5)
TABLE_COLUMNS = ("method", "reduction_ratio", "success_rate", "rmse_nontarget", "mae_nontarget",
                 "fss_1", "fss_3", "fss_5")


def guided_label(lam: float) -> str:
    return f"Ours (λ={lam:.4g})"


@dataclass
class InterventionSettings:
    lambdas: list[float]
    T: int = 2
    n: int = 2
    skip_final: bool = True
    epsilon: float = 0.07
    eta: float | None = None
    K: int = 50


@dataclass
class EventInputs:
    event: EventRecord
    x_prev: AtmosphericState  # X^{t-1}
    x_cur: AtmosphericState  # X^t
    truth_next: AtmosphericState  # X^{t+1}
    truth_target: AtmosphericState  # X^{t+2}, the event time

    @classmethod
    def from_states(cls, event: EventRecord, by_time: dict[int, AtmosphericState]) -> "EventInputs":
        t = event.time_index - 2
        return cls(event, by_time[t - 1], by_time[t], by_time[t + 1], by_time[t + 2])


@dataclass
class EventInterventions:
    standard: AtmosphericState
    perturbations: dict[str, Perturbation]
    passes: dict[str, dict]
    loss_traces: dict[str, list[float]] = field(default_factory=dict)


def event_seed(seed: int, event: EventRecord, stream: int) -> list[int]:
    return [int(seed), int(event.time_index), int(event.cell[0]), int(event.cell[1]), stream]


def calibration_ratio(inputs: EventInputs, params: DenoiserParams, schedule: NoiseSchedule,
                      settings: InterventionSettings, seed: int, fraction: float = 0.01) -> float:
    cfg = GuidanceConfig(inputs.event.region, 1.0, settings.T, settings.n, settings.skip_final)
    rng = np.random.default_rng(event_seed(seed, inputs.event, 0))
    return lambda_scale_probe(inputs.x_prev, inputs.x_cur, params, schedule, cfg, rng, fraction)


def intervene_event(inputs: EventInputs, params: DenoiserParams, schedule: NoiseSchedule,
                    settings: InterventionSettings, seed: int) -> EventInterventions:
    spec = params.spec
    region = inputs.event.region
    # the standard forecast shares the initial noise with every guided run
    noise = forecast_noise(seed, inputs.x_cur.time_index, spec)
    z = run_sampler(params, schedule, inputs.x_prev.data, inputs.x_cur.data, noise)
    standard = AtmosphericState.from_raw(spec, reconstruct(inputs.x_cur.data, z, params.residual_stats),
                                         inputs.x_cur.time_index + 1)
    perts, passes, traces = {}, {}, {}
    for lam in settings.lambdas:
        cfg = GuidanceConfig(region, lam, settings.T, settings.n, settings.skip_final)
        rng = np.random.default_rng(event_seed(seed, inputs.event, 1))
        res = guided_sample(inputs.x_prev, inputs.x_cur, params, schedule, cfg, rng,
                            standard=standard, noise=noise)
        label = guided_label(lam)
        perts[label] = res.perturbation
        passes[label] = res.counter.as_dict()
        traces[label] = res.loss_trace
    acfg = AttackConfig(region, settings.epsilon, settings.eta, settings.K, settings.T, settings.n)
    att = pgd_attack(inputs.x_cur, standard, params, schedule, acfg,
                     np.random.default_rng(event_seed(seed, inputs.event, 2)))
    perts[PGD_LABEL] = att.perturbation
    passes[PGD_LABEL] = att.counter.as_dict()
    traces[PGD_LABEL] = att.loss_trace
    return EventInterventions(standard, perts, passes, traces)


def _rollout(params, schedule, x_cur, x_next, noise):
    tap = []
    z = run_sampler(params, schedule, x_cur.data, x_next.data, noise, latent_tap=tap)
    out = AtmosphericState.from_raw(params.spec, reconstruct(x_next.data, z, params.residual_stats),
                                    x_next.time_index + 1)
    return out, tap


@dataclass
class EventEvaluation:
    record: dict
    reference_latent_region: np.ndarray  # (cells, D) final-step reanalysis latents inside the region
    region_mean_traces: dict[str, np.ndarray]  # label -> (steps, D)


def evaluate_event(inputs: EventInputs, interventions: EventInterventions, params: DenoiserParams,
                   schedule: NoiseSchedule, transfer: TransferParams | None, clim_slot: np.ndarray,
                   tau: float, seed: int) -> EventEvaluation:
    spec = params.spec
    ev = inputs.event
    region = ev.region
    inside = cells_mask(region, (spec.height, spec.width))
    # same noise as the catalog's chained forecast, so the standard run reproduces the filtered event
    noise = forecast_noise(seed, inputs.truth_next.time_index, spec)

    ref_fc, ref_tap = _rollout(params, schedule, inputs.x_cur, inputs.truth_next, noise)
    std_fc, std_tap = _rollout(params, schedule, inputs.x_cur, interventions.standard, noise)
    std_dev = latent_deviation(ref_tap, std_tap, inside)
    std_transfer = None
    if transfer is not None:
        std_transfer = transfer_rollout(inputs.x_cur, interventions.standard, transfer).precip_total

    record = {
        "event": ev.to_dict(),
        "standard": {
            "region_precip": region_mean(std_fc, region),
            "reanalysis_region_precip": region_mean(inputs.truth_target, region),
            "latent": std_dev.to_dict(),
            "latent_tail": std_dev.tail_mean(),
        },
        "methods": {},
    }
    if std_transfer is not None:
        record["standard"]["transfer_region_precip"] = float(std_transfer[inside].mean())
    traces = {"standard": np.array([t[inside].mean(axis=0) for t in std_tap])}

    for label, pert in interventions.perturbations.items():
        perturbed = pert.apply(interventions.standard)
        fc, tap = _rollout(params, schedule, inputs.x_cur, perturbed, noise)
        rmse, mae = nontarget_scores(std_fc, fc, region)
        dev = latent_deviation(ref_tap, tap, inside)
        m = {
            "reduction_ratio": reduction_ratio(std_fc, fc, region),
            "success_rate": success_rate(std_fc, fc, clim_slot, tau, region),
            "rmse_nontarget": rmse,
            "mae_nontarget": mae,
            **{f"fss_{k}": fss(std_fc, fc, tau, region, k) for k in FSS_WINDOWS},
            "region_precip": region_mean(fc, region),
            "profile": perturbation_profile(pert.delta, spec, params.state_stats),
            "latent": dev.to_dict(),
            "latent_tail": dev.tail_mean(),
            "passes": interventions.passes.get(label),
            "loss_trace": [float(x) for x in interventions.loss_traces.get(label, [])],
        }
        if transfer is not None:
            tr = transfer_rollout(inputs.x_cur, perturbed, transfer).precip_total
            base = float(std_transfer[inside].mean())
            m["transfer_region_precip"] = float(tr[inside].mean())
            m["transfer_reduction"] = None if not base > 0 else 1.0 - float(tr[inside].mean()) / base
        record["methods"][label] = m
        traces[label] = np.array([t[inside].mean(axis=0) for t in tap])

    return EventEvaluation(record, ref_tap[-1][inside], traces)
