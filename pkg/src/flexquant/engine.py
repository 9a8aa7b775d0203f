"""Dynamic-precision greedy generation.

The loop: prefill the prompt at the starting rung, derive the PPLE
threshold, then emit tokens greedily. After each token its PPLE is fed to
the scheduler; when the scheduler fires, the next plan entries are applied
and take effect from the following forward pass. Every token gets a trace
record with its PPLE, fault tolerance, precision accounting and timings.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from time import perf_counter_ns
from typing import Iterable, Sequence

import numpy as np

from .analyzer import SwitchPlan
from .errors import CapacityError, ConfigurationError, InputError
from .metrics import agreement_rate, rouge_l
from .model import FP_BITS, SwitchEvent, TinyTransformer
from .scheduler import ABSOLUTE, SchedulerConfig, SchedulerState, next_token_stats

TIMING_FIELDS = ("elapsed_ns", "latency_ns")
LATENCY_BUCKETS = ("fp", "int8", "int4", "attention", "other", "ppl_entropy")


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int = 64
    eos_token: int | None = None
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    start_bits: int = 8

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ConfigurationError("max_new_tokens must be >= 1")
        if self.start_bits not in (FP_BITS, 8, 4):
            raise ConfigurationError(f"start_bits must be one of {FP_BITS}, 8, 4")


@dataclass
class TokenRecord:
    token_index: int  # 1-based position among generated tokens
    token_id: int
    ppl_entropy: float
    fault_tolerance: float
    moving_average: float | None
    effective_bits: float
    weight_bytes_touched: int
    elapsed_ns: int
    switch_event: list[dict] | None = None
    latency_ns: dict[str, int] = field(default_factory=dict)

    def without_timing(self) -> dict:
        d = asdict(self)
        for k in TIMING_FIELDS:
            d.pop(k)
        return d


@dataclass
class DecodeTrace:
    records: list[TokenRecord] = field(default_factory=list)
    threshold: float | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def tokens(self) -> list[int]:
        return [r.token_id for r in self.records]

    def switch_events(self) -> list[SwitchEvent]:
        return [SwitchEvent(**e) for r in self.records for e in (r.switch_event or [])]

    def switch_token_indices(self) -> list[int]:
        return [r.token_index for r in self.records if r.switch_event]

    def comparable(self) -> list[dict]:
        return [r.without_timing() for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=False) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "DecodeTrace":
        return cls([TokenRecord(**json.loads(ln)) for ln in text.splitlines() if ln.strip()])

    @classmethod
    def read(cls, path) -> "DecodeTrace":
        return cls.from_jsonl(Path(path).read_text())


def _executable_plan(plan: SwitchPlan, model: TinyTransformer, start_bits: int) -> SwitchPlan:
    unknown = plan.layer_ids() - set(model.linears)
    if unknown:
        raise ConfigurationError(f"plan names layers the model lacks: {sorted(unknown)[:3]}")
    runnable = plan.for_start(start_bits)
    rung = {lid: start_bits for lid in model.linears}
    for e in runnable:
        if rung[e.layer_id] != e.from_bits or e.to_bits >= e.from_bits:
            raise ConfigurationError(
                f"plan entry {e.layer_id} {e.from_bits}->{e.to_bits} does not follow a downward ladder from {start_bits}"
            )
        rung[e.layer_id] = e.to_bits
    return runnable


def generate(prompt: Sequence[int], model: TinyTransformer, plan: SwitchPlan,
             cfg: GenerationConfig = GenerationConfig()) -> tuple[list[int], DecodeTrace]:
    """Greedy generation with PPLE-triggered precision switching.

    Returns the full sequence (prompt followed by generated tokens) and the
    per-token trace. The model is left at its final precision state.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("empty prompt")
    if len(prompt) + cfg.max_new_tokens - 1 > model.config.max_seq_len:
        raise CapacityError(
            f"prompt ({len(prompt)}) plus {cfg.max_new_tokens} new tokens exceeds max_seq_len {model.config.max_seq_len}"
        )
    runnable = _executable_plan(plan, model, cfg.start_bits)
    model.set_all_precision(cfg.start_bits)
    state = SchedulerState(cfg.scheduler, len(runnable))

    trace = DecodeTrace()
    sequence = list(prompt)
    prof = model.profiler
    cache = None
    for step in range(1, cfg.max_new_tokens + 1):
        t0 = perf_counter_ns()
        prof.reset()
        bits_now = model.effective_bits()
        bytes_before = model.traffic.bytes_touched
        if cache is None:
            all_logits, cache = model.forward_prefill(prompt)
            logits = all_logits[-1]
            touched = model.traffic.bytes_touched - bytes_before
            prof.lap("other")
            trace.threshold = state.set_threshold(all_logits)
            prof.lap("ppl_entropy")
        else:
            logits = model.forward_decode(sequence[-1], cache)
            touched = model.traffic.bytes_touched - bytes_before
            prof.lap("other")

        pple, margin = next_token_stats(logits)
        to_apply = state.observe(pple)
        prof.lap("ppl_entropy")

        token = int(np.argmax(logits))
        sequence.append(token)
        events = []
        for idx in to_apply:
            e = runnable[idx]
            ev = model.set_precision(e.layer_id, e.to_bits)
            if ev is not None:
                events.append(asdict(ev))
        prof.lap("other")
        elapsed = perf_counter_ns() - t0

        trace.records.append(TokenRecord(
            token_index=step,
            token_id=token,
            ppl_entropy=pple,
            fault_tolerance=margin,
            moving_average=state.last_average,
            effective_bits=bits_now,
            weight_bytes_touched=touched,
            elapsed_ns=elapsed,
            switch_event=events or None,
            latency_ns=dict(prof.buckets),
        ))
        if cfg.eos_token is not None and token == cfg.eos_token:
            break
    return sequence, trace


def generate_static(prompt: Sequence[int], model: TinyTransformer, rung: int,
                    cfg: GenerationConfig = GenerationConfig()) -> tuple[list[int], DecodeTrace]:
    """Generation with every layer pinned to ``rung`` and switching disabled."""
    return generate(prompt, model, SwitchPlan(), replace(cfg, start_bits=rung))


def forced_schedule_config(cfg: GenerationConfig, tokens_per_switch: int) -> GenerationConfig:
    """Switch one layer every ``tokens_per_switch`` tokens regardless of PPLE."""
    sched = replace(cfg.scheduler, window_len=tokens_per_switch, theta=math.inf,
                    threshold_mode=ABSOLUTE, layers_per_switch=1)
    return replace(cfg, scheduler=sched)


@dataclass
class SweepRow:
    speed: int
    final_effective_bits: float
    mean_bytes_per_token: float
    agreement: float
    first_divergence: int | None
    rouge_l: float
    switches: int
    tpot_ns: float
    bytes_per_token: list[int] = field(repr=False, default_factory=list)


def sweep_switch_speed(prompt: Sequence[int], model: TinyTransformer, plan: SwitchPlan,
                       speeds: Iterable[int], cfg: GenerationConfig = GenerationConfig(),
                       reference: Sequence[int] | None = None) -> list[SweepRow]:
    """One forced-schedule run per speed, scored against the fp greedy output."""
    speeds = list(speeds)
    if any(s < 1 for s in speeds):
        raise ConfigurationError("switching speeds must be positive")
    if reference is None:
        seq, _ = generate_static(prompt, model, FP_BITS, cfg)
        reference = seq[len(prompt):]
    rows = []
    for s in speeds:
        seq, trace = generate(prompt, model, plan, forced_schedule_config(cfg, s))
        out = seq[len(prompt):]
        rate, div = agreement_rate(out, reference)
        per_token = [r.weight_bytes_touched for r in trace]
        rows.append(SweepRow(
            speed=s,
            final_effective_bits=model.effective_bits(),
            mean_bytes_per_token=float(np.mean(per_token)),
            agreement=rate,
            first_divergence=div,
            rouge_l=rouge_l(out, reference),
            switches=len(trace.switch_events()),
            tpot_ns=float(np.mean([r.elapsed_ns for r in trace.records[1:]] or [trace[0].elapsed_ns])),
            bytes_per_token=per_token,
        ))
    return rows


def sweep_corpus(prompts: Sequence[Sequence[int]], model: TinyTransformer, plan: SwitchPlan,
                 speeds: Iterable[int], cfg: GenerationConfig = GenerationConfig()) -> list[SweepRow]:
    """Average :func:`sweep_switch_speed` over several prompts (one row per speed)."""
    speeds = list(speeds)
    per_prompt = [sweep_switch_speed(p, model, plan, speeds, cfg) for p in prompts]
    out = []
    for i, s in enumerate(speeds):
        rows = [r[i] for r in per_prompt]
        divs = [r.first_divergence for r in rows if r.first_divergence is not None]
        out.append(SweepRow(
            speed=s,
            final_effective_bits=float(np.mean([r.final_effective_bits for r in rows])),
            mean_bytes_per_token=float(np.mean([r.mean_bytes_per_token for r in rows])),
            agreement=float(np.mean([r.agreement for r in rows])),
            first_divergence=min(divs) if divs else None,
            rouge_l=float(np.mean([r.rouge_l for r in rows])),
            switches=int(round(np.mean([r.switches for r in rows]))),
            tpot_ns=float(np.mean([r.tpot_ns for r in rows])),
        ))
    return out


SWEEP_CSV_COLUMNS = ("speed", "final_effective_bits", "mean_bytes_per_token", "agreement",
                     "first_divergence", "rouge_l", "switches", "tpot_ns")


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_CSV_COLUMNS)
    for r in rows:
        w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in SWEEP_CSV_COLUMNS])
    return buf.getvalue()


@dataclass
class TrafficReport:
    total_weight_bytes: int
    buckets_ns: dict[str, int]
    measured_total_ns: int
    ppl_entropy_share: float

    @property
    def bucket_sum_ns(self) -> int:
        return sum(self.buckets_ns.values())

    @property
    def coverage(self) -> float:
        """Bucket sum over measured total (1.0 means fully attributed)."""
        return self.bucket_sum_ns / self.measured_total_ns if self.measured_total_ns else 1.0


def traffic_report(trace: DecodeTrace | Iterable[TokenRecord]) -> TrafficReport:
    records = list(trace)
    if not records:
        raise InputError("empty trace")
    buckets = {b: 0 for b in LATENCY_BUCKETS}
    for r in records:
        for k, v in r.latency_ns.items():
            buckets[k] = buckets.get(k, 0) + v
    total = sum(r.elapsed_ns for r in records)
    summed = sum(buckets.values())
    return TrafficReport(
        total_weight_bytes=sum(r.weight_bytes_touched for r in records),
        buckets_ns=buckets,
        measured_total_ns=total,
        ppl_entropy_share=buckets["ppl_entropy"] / summed if summed else 0.0,
    )
