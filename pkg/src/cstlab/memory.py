"""Activation-memory accounting: analytic prediction vs instrumented
measurement.

``predict_retained`` statically derives, from the trainable mask alone,
which buffers a recorded graph must keep alive for backward (the
active-path rule) and simulates a topological schedule to get the peak
materialized element count.  ``measure_retained`` replays the same tape
for real — executing kernels, freeing every buffer at its last use
unless retained, and tracking the actual peak.  The two must agree
bit-exactly; they are kept as separate code paths on purpose (the
predictor has its own per-op rule table and never looks at what the
engine chose to save).

Lifetime model, shared by both modes: a value is live from its
production step through its last consumer; values nobody consumes die at
production; retained values (and op-internal backward buffers) survive
to the end of the schedule.  Inference retains nothing except the final
value.  The peak is taken over per-step snapshots, so the training peak
always dominates the inference peak at the same config.

Units are activation element counts (4 bytes each at float32), not
allocator peaks: element counts are machine-independent and exactly
testable.  Parameters are accounted separately and never counted as
activations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Node, Tape, Tensor, forward_kernel, packed_mask_elems


def _raw_elems(array: np.ndarray) -> int:
    """Raw backward buffers count by their byte footprint at 4 B/elem."""
    return (array.nbytes + 3) // 4


@dataclass(frozen=True)
class MemoryReport:
    trainable_params: int
    total_params: int
    retained_train_elems: int
    retained_infer_elems: int
    optimizer_state_elems: int

    def __post_init__(self):
        if self.trainable_params > self.total_params:
            raise ValueError("trainable_params exceeds total_params")


# ----------------------------------------------------------------------
# static prediction
# ----------------------------------------------------------------------


def _static_requires_grad(tape: Tape) -> list[bool]:
    """Recompute requires-grad flags from the trainable mask only."""
    rg = [False] * len(tape.values)
    for v in tape.values:
        if v.is_param:
            rg[v.vid] = v.param.trainable
    for node in tape.nodes:
        rg[node.out] = any(rg[vid] for vid in node.inputs)
    return rg


def predicted_saves(node: Node, rg: list[bool], sizes: list[int],
                    itemsize: int):
    """What backward reads for one op: ``([vids], raw_elems)``.

    Restates each op's backward data dependencies given which inputs
    need gradients; deliberately independent of what the engine
    recorded in ``Node.saved``.
    """
    if not rg[node.out]:
        return [], 0
    op = node.op
    ins = node.inputs
    needs = [rg[v] for v in ins]
    vids: list[int] = []
    raw = 0
    if op in ("conv2d", "linear"):
        if needs[1]:
            vids.append(ins[0])     # x, for the weight gradient
        if needs[0]:
            vids.append(ins[1])     # w, to propagate into x
    elif op in ("relu", "eabs"):
        vids.append(ins[0])
    elif op == "sigmoid":
        vids.append(node.out)       # grad is y*(1-y)
    elif op in ("mul", "smul"):
        if needs[0]:
            vids.append(ins[1])
        if needs[1]:
            vids.append(ins[0])
    elif op == "emax":
        vids.extend([ins[0], node.out])   # routing mask is (out == a)
    elif op == "mtc_gate":
        if needs[1]:
            vids.append(ins[0])     # L, for the side gradient
        if needs[0]:
            vids.append(ins[1])     # S, to propagate into L
        raw = packed_mask_elems(sizes[node.out])
    elif op == "channel_affine":
        if needs[0]:
            vids.append(ins[1])     # scale, to propagate into x
        if needs[1]:
            vids.append(ins[0])     # x, for the scale gradient
    elif op == "cross_entropy":
        raw = (sizes[ins[0]] * itemsize + 3) // 4   # softmax probabilities
    elif op in ("add", "sub", "scale_shift", "concat_channels",
                "global_avg_pool", "channel_shift", "sum_all", "mean_all"):
        pass
    else:
        raise KeyError(f"no retention rule for op {op!r}")
    return vids, raw


def predicted_retained_vids(tape: Tape, loss: Tensor) -> set[int]:
    """Non-parameter value ids the active-path rule retains (loss incl.)."""
    rg = _static_requires_grad(tape)
    sizes = _value_sizes(tape)
    keep: set[int] = set()
    for node in tape.nodes:
        vids, _ = predicted_saves(node, rg, sizes, tape.dtype.itemsize)
        for vid in vids:
            if not tape.values[vid].is_param:
                keep.add(vid)
    keep.add(loss.vid)
    return keep


def _value_sizes(tape: Tape) -> list[int]:
    return [v.size for v in tape.values]


def _lifetimes(tape: Tape, retained: set[int]):
    """(start, end) step per non-param vid under the shared liveness rule."""
    n_steps = len(tape.nodes)
    start: dict[int, int] = {}
    for v in tape.values:
        if not v.is_param:
            start[v.vid] = -1       # leaf: exists before the first step
    last: dict[int, int] = {}
    for t, node in enumerate(tape.nodes):
        start[node.out] = t
        for vid in node.inputs:
            last[vid] = t
    end: dict[int, int] = {}
    for vid, t0 in start.items():
        if vid in retained:
            end[vid] = n_steps - 1
        else:
            end[vid] = last.get(vid, t0)
    return start, end


def _simulate_peak(tape: Tape, retained: set[int], raw_by_step: dict[int, int],
                   sizes: list[int]) -> int:
    """Peak elements over per-step snapshots, by pure size arithmetic."""
    start, end = _lifetimes(tape, retained)
    deaths: dict[int, list[int]] = {}
    live = 0
    for vid, t0 in start.items():
        if t0 == -1 and end[vid] >= 0:
            live += sizes[vid]
        deaths.setdefault(end[vid], []).append(vid)
    peak = 0
    raw_total = 0
    for t, node in enumerate(tape.nodes):
        live += sizes[node.out]       # an output is live at its own step
        raw_total += raw_by_step.get(t, 0)
        peak = max(peak, live + raw_total)
        for vid in deaths.get(t, ()):
            live -= sizes[vid]
    return peak


def predict_retained(tape: Tape, loss: Tensor) -> MemoryReport:
    """Analytic memory report for a recorded graph and its trainable mask."""
    if loss.vid >= len(tape.values) or tape.values[loss.vid] is not loss:
        raise ValueError("loss does not belong to this tape")
    rg = _static_requires_grad(tape)
    if not rg[loss.vid]:
        raise ValueError("loss is disconnected from all trainable parameters")

    sizes = _value_sizes(tape)
    retained = predicted_retained_vids(tape, loss)
    raw_by_step: dict[int, int] = {}
    for t, node in enumerate(tape.nodes):
        _, raw = predicted_saves(node, rg, sizes, tape.dtype.itemsize)
        if raw:
            raw_by_step[t] = raw_by_step.get(t, 0) + raw

    train_peak = _simulate_peak(tape, retained, raw_by_step, sizes)
    infer_peak = _simulate_peak(tape, {loss.vid}, {}, sizes)
    return _finish_report(tape, train_peak, infer_peak)


def _finish_report(tape: Tape, train_peak: int, infer_peak: int):
    total = sum(v.data.size for v in tape.values if v.is_param)
    trainable = sum(v.data.size for v in tape.values
                    if v.is_param and v.param.trainable)
    return MemoryReport(
        trainable_params=int(trainable),
        total_params=int(total),
        retained_train_elems=int(train_peak),
        retained_infer_elems=int(infer_peak),
        optimizer_state_elems=int(2 * trainable),
    )


# ----------------------------------------------------------------------
# instrumented measurement
# ----------------------------------------------------------------------


def measured_retained_vids(tape: Tape, loss: Tensor) -> set[int]:
    """Non-parameter buffers the engine actually keeps for backward."""
    return tape.retained_vids(loss)


def replay_peak(tape: Tape, loss: Tensor, training: bool) -> int:
    """Re-execute the recorded graph with real buffers, freeing each at
    its last use (retention per the engine's own saved sets in training
    mode), and return the observed peak element count."""
    retained = tape.retained_vids(loss) if training else {loss.vid}
    start, end = _lifetimes(tape, retained)
    buffers: dict[int, np.ndarray] = {}
    for v in tape.values:
        if v.is_param or start[v.vid] != -1:
            continue
        if end[v.vid] >= 0:
            if v.data is None:
                raise ValueError("leaf buffer was dropped before replay")
            buffers[v.vid] = v.data
    raw_live = 0
    peak = 0
    for t, node in enumerate(tape.nodes):
        args = []
        for vid in node.inputs:
            v = tape.values[vid]
            args.append(v.param.data if v.is_param else buffers[vid])
        buffers[node.out] = forward_kernel(node.op, args, node.attrs)
        if training:
            raw_live += sum(_raw_elems(entry) for entry in node.saved.values()
                            if isinstance(entry, np.ndarray))
        peak = max(peak, sum(b.size for b in buffers.values()) + raw_live)
        for vid in [vid for vid in buffers if end.get(vid, -2) == t]:
            del buffers[vid]
    return peak


def measure_retained(tape: Tape, loss: Tensor) -> MemoryReport:
    """Instrumented counterpart of ``predict_retained``.

    Replays the recorded graph twice (training and inference lifetimes)
    with real buffers and reports the observed peaks.  Must equal the
    prediction exactly.
    """
    train_peak = replay_peak(tape, loss, training=True)
    infer_peak = replay_peak(tape, loss, training=False)
    return _finish_report(tape, train_peak, infer_peak)


# ----------------------------------------------------------------------
# table emitters
# ----------------------------------------------------------------------

TABLE_COLUMNS = ("strategy", "train_elems", "infer_elems",
                 "trainable_params", "total_params", "metric")


def report_rows(entries) -> list[dict]:
    """Normalize (label, MemoryReport, metric|None) triples into rows."""
    rows = []
    for label, report, metric in entries:
        rows.append({
            "strategy": label,
            "train_elems": report.retained_train_elems,
            "infer_elems": report.retained_infer_elems,
            "trainable_params": report.trainable_params,
            "total_params": report.total_params,
            "metric": "" if metric is None else f"{metric:.6g}",
        })
    return rows


def to_csv(rows: list[dict], columns=TABLE_COLUMNS) -> str:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(str(row.get(c, "")) for c in columns))
    return "\n".join(lines) + "\n"


def to_markdown(rows: list[dict], columns=TABLE_COLUMNS) -> str:
    header = "| " + " | ".join(columns) + " |"
    rule = "|" + "|".join("---" for _ in columns) + "|"
    lines = [header, rule]
    for row in rows:
        lines.append("| " + " | ".join(str(row.get(c, "")) for c in columns)
                     + " |")
    return "\n".join(lines) + "\n"
