"""Sequence classification over corridors of image features: an LSTM cell
with forget/input/output gates and tanh candidate, the hidden -> dropout ->
dense-50 -> ReLU -> sigmoid head, backpropagation-through-time training,
shared and separate multi-label modes, and overlapping-window prediction.

Gate parameters follow the W/U/b naming with W multiplying the previous
hidden state and U the step input. Training packs the four gates into
single matrices for speed; the named per-gate tensors remain the source
of truth (and the serialization layout).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import nn
from .data import FeatureSequence, ImageRecord, _runs
from .modelio import load_tensors, save_tensors

GATES = ("f", "i", "o", "u")
CLASS_GROUPS = ("rs", "mcb", "cb")


class LstmState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


class LstmGates(NamedTuple):
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    u: np.ndarray


def zero_state(hidden: int) -> LstmState:
    return LstmState(h=np.zeros(hidden), c=np.zeros(hidden))


def init_lstm_params(hidden: int, input_dim: int, rng: np.random.Generator) -> nn.Params:
    """Glorot-uniform gate matrices; zero biases except forget-gate bias 1.0."""
    params: nn.Params = {}
    for g in GATES:
        params[f"W_{g}"] = nn.glorot_uniform(rng, (hidden, hidden), hidden, hidden)
        params[f"U_{g}"] = nn.glorot_uniform(rng, (hidden, input_dim), input_dim, hidden)
        params[f"b_{g}"] = np.ones(hidden) if g == "f" else np.zeros(hidden)
    return params


def lstm_cell_step(params: nn.Params, x: np.ndarray, prev: LstmState) -> tuple[LstmState, LstmGates]:
    """One recurrence step: gate activations, cell update, hidden output."""
    hidden = prev.h.shape[0]
    if params["U_f"].shape[1] != x.shape[0] or params["W_f"].shape[0] != hidden:
        raise ValueError(
            f"dimension mismatch: x {x.shape}, h {prev.h.shape}, "
            f"W {params['W_f'].shape}, U {params['U_f'].shape}"
        )
    f = nn.sigmoid(params["W_f"] @ prev.h + params["U_f"] @ x + params["b_f"])
    i = nn.sigmoid(params["W_i"] @ prev.h + params["U_i"] @ x + params["b_i"])
    o = nn.sigmoid(params["W_o"] @ prev.h + params["U_o"] @ x + params["b_o"])
    u = nn.tanh(params["W_u"] @ prev.h + params["U_u"] @ x + params["b_u"])
    c = f * prev.c + i * u
    h = o * nn.tanh(c)
    return LstmState(h=h, c=c), LstmGates(f=f, i=i, o=o, u=u)


def lstm_forward(
    params: nn.Params, inputs: np.ndarray, initial: LstmState | None = None
) -> tuple[np.ndarray, LstmState]:
    """Run the cell over a (steps, input_dim) sequence from the given state.

    Returns every per-step hidden vector plus the final state.
    """
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError(f"inputs must be a nonempty (steps, input_dim) array, got {inputs.shape}")
    hidden = params["W_f"].shape[0]
    state = initial if initial is not None else zero_state(hidden)
    outs = np.empty((inputs.shape[0], hidden))
    for t in range(inputs.shape[0]):
        state, _ = lstm_cell_step(params, inputs[t], state)
        outs[t] = state.h
    return outs, state


# --- packed fast path (gates stacked f,i,o,u along the first axis) ---


def _packed(group: nn.Params) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    wp = np.concatenate([group[f"W_{g}"] for g in GATES], axis=0)
    up = np.concatenate([group[f"U_{g}"] for g in GATES], axis=0)
    bp = np.concatenate([group[f"b_{g}"] for g in GATES])
    return wp, up, bp


def _unpack_grads(wp: np.ndarray, up: np.ndarray, bp: np.ndarray, hidden: int) -> nn.Params:
    grads: nn.Params = {}
    for k, g in enumerate(GATES):
        sl = slice(k * hidden, (k + 1) * hidden)
        grads[f"W_{g}"] = wp[sl]
        grads[f"U_{g}"] = up[sl]
        grads[f"b_{g}"] = bp[sl]
    return grads


def _forward_packed(
    wp: np.ndarray, up: np.ndarray, bp: np.ndarray, xs: np.ndarray, hidden: int
) -> dict:
    """Forward over one window, retaining gate activations for BPTT.

    The recurrence loop is allocation-free: every step writes into
    preallocated buffers. The plain logistic formula is safe here under
    errstate since an overflowing exp saturates to the correct limit.
    """
    steps = xs.shape[0]
    ux = xs @ up.T + bp  # input projection for all steps at once
    F = np.empty((steps, hidden))
    I = np.empty((steps, hidden))
    O = np.empty((steps, hidden))
    U = np.empty((steps, hidden))
    C = np.empty((steps, hidden))
    TC = np.empty((steps, hidden))
    H = np.empty((steps, hidden))
    z = np.empty(4 * hidden)
    gates = np.empty(3 * hidden)
    tmp = np.empty(hidden)
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    with np.errstate(over="ignore"):
        for t in range(steps):
            np.dot(wp, h, out=z)
            z += ux[t]
            np.negative(z[: 3 * hidden], out=gates)
            np.exp(gates, out=gates)
            gates += 1.0
            np.reciprocal(gates, out=gates)
            F[t] = gates[:hidden]
            I[t] = gates[hidden : 2 * hidden]
            O[t] = gates[2 * hidden :]
            np.tanh(z[3 * hidden :], out=U[t])
            np.multiply(F[t], c, out=c)
            np.multiply(I[t], U[t], out=tmp)
            c += tmp
            C[t] = c
            np.tanh(c, out=TC[t])
            np.multiply(O[t], TC[t], out=H[t])
            h = H[t]
    return {"xs": xs, "wp": wp, "F": F, "I": I, "O": O, "U": U, "C": C, "TC": TC, "H": H}


def _lstm_forward_cached(group: nn.Params, xs: np.ndarray, hidden: int) -> dict:
    wp, up, bp = _packed(group)
    return _forward_packed(wp, up, bp, xs, hidden)


def _lstm_backward(cache: dict, grad_h: np.ndarray, hidden: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BPTT through the cached window; returns packed (wp, up, bp) gradients.

    Gate derivatives are precomputed across all steps; the sequential loop
    writes into preallocated buffers only.
    """
    xs, wp = cache["xs"], cache["wp"]
    F, I, O, U, C, TC, H = (cache[k] for k in ("F", "I", "O", "U", "C", "TC", "H"))
    steps = xs.shape[0]
    fg = F * (1.0 - F)
    ig = I * (1.0 - I)
    og = O * (1.0 - O)
    ug = 1.0 - U * U
    tcg = 1.0 - TC * TC
    c_prev = np.vstack([np.zeros(hidden), C[:-1]])
    dz_all = np.empty((steps, 4 * hidden))
    dh = np.zeros(hidden)
    dc = np.zeros(hidden)
    dc_next = np.zeros(hidden)
    tmp = np.empty(hidden)
    for t in range(steps - 1, -1, -1):
        dh += grad_h[t]
        np.multiply(dh, O[t], out=tmp)
        tmp *= tcg[t]
        np.add(tmp, dc_next, out=dc)
        dz = dz_all[t]
        np.multiply(dc, c_prev[t], out=dz[:hidden])
        dz[:hidden] *= fg[t]
        np.multiply(dc, U[t], out=dz[hidden : 2 * hidden])
        dz[hidden : 2 * hidden] *= ig[t]
        np.multiply(dh, TC[t], out=dz[2 * hidden : 3 * hidden])
        dz[2 * hidden : 3 * hidden] *= og[t]
        np.multiply(dc, I[t], out=dz[3 * hidden :])
        dz[3 * hidden :] *= ug[t]
        np.dot(wp.T, dz, out=dh)
        np.multiply(dc, F[t], out=dc_next)
    h_prev = np.vstack([np.zeros(hidden), H[:-1]])
    wp_grad = dz_all.T @ h_prev
    up_grad = dz_all.T @ xs
    bp_grad = dz_all.sum(axis=0)
    return wp_grad, up_grad, bp_grad


# --- the full per-group stack: LSTM -> dropout -> dense -> ReLU -> dense -> sigmoid ---


@dataclass
class SequenceModel:
    """Multi-label sequence classifier in shared (one 3-output stack) or
    separate (three 1-output stacks keyed by class) mode."""

    mode: str  # "shared" | "separate"
    hidden: int
    input_dim: int
    mid_dim: int
    dropout_rate: float
    groups: dict[str, nn.Params]

    def group_names(self) -> tuple[str, ...]:
        return ("shared",) if self.mode == "shared" else CLASS_GROUPS


def init_sequence_model(
    mode: str,
    input_dim: int,
    hidden: int = 100,
    mid_dim: int = 50,
    dropout_rate: float = 0.2,
    seed: int = 0,
) -> SequenceModel:
    """Build a fresh model; each separate-mode group gets its own seed stream."""
    if mode not in ("shared", "separate"):
        raise ValueError(f"mode must be 'shared' or 'separate', got {mode!r}")
    if not (0.0 <= dropout_rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    out_dim = 3 if mode == "shared" else 1
    names = ("shared",) if mode == "shared" else CLASS_GROUPS
    groups = {}
    for k, name in enumerate(names):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        group = init_lstm_params(hidden, input_dim, rng)
        group["mid.w"] = nn.glorot_uniform(rng, (mid_dim, hidden), hidden, mid_dim)
        group["mid.b"] = np.zeros(mid_dim)
        group["out.w"] = nn.glorot_uniform(rng, (out_dim, mid_dim), mid_dim, out_dim)
        group["out.b"] = np.zeros(out_dim)
        groups[name] = group
    return SequenceModel(
        mode=mode,
        hidden=hidden,
        input_dim=input_dim,
        mid_dim=mid_dim,
        dropout_rate=dropout_rate,
        groups=groups,
    )


def _head_forward(group: nn.Params, H: np.ndarray, masks: np.ndarray | None) -> dict:
    d = H * masks if masks is not None else H
    z_mid = d @ group["mid.w"].T + group["mid.b"]
    a_mid = nn.relu(z_mid)
    z_out = a_mid @ group["out.w"].T + group["out.b"]
    probs = nn.sigmoid(z_out)
    return {"d": d, "z_mid": z_mid, "a_mid": a_mid, "probs": probs}


PACKED_KEYS = ("wp", "up", "bp", "mid.w", "mid.b", "out.w", "out.b")


def _pack_group(group: nn.Params) -> nn.Params:
    wp, up, bp = _packed(group)
    return {
        "wp": wp,
        "up": up,
        "bp": bp,
        "mid.w": group["mid.w"].copy(),
        "mid.b": group["mid.b"].copy(),
        "out.w": group["out.w"].copy(),
        "out.b": group["out.b"].copy(),
    }


def _write_back_group(group: nn.Params, packed: nn.Params, hidden: int) -> None:
    for k, g in enumerate(GATES):
        sl = slice(k * hidden, (k + 1) * hidden)
        group[f"W_{g}"][:] = packed["wp"][sl]
        group[f"U_{g}"][:] = packed["up"][sl]
        group[f"b_{g}"][:] = packed["bp"][sl]
    for key in ("mid.w", "mid.b", "out.w", "out.b"):
        group[key][:] = packed[key]


def _packed_loss_and_grads(
    packed: nn.Params,
    xs: np.ndarray,
    labels: np.ndarray,
    hidden: int,
    masks: np.ndarray | None = None,
) -> tuple[float, nn.Params]:
    """Window loss plus gradients for the packed parameter layout."""
    cache = _forward_packed(packed["wp"], packed["up"], packed["bp"], xs, hidden)
    head = _head_forward(packed, cache["H"], masks)
    probs = head["probs"]
    loss, _ = nn.bce_loss(probs, labels)
    dz_out = nn.bce_grad_from_logits(probs, labels)
    grads: nn.Params = {
        "out.w": dz_out.T @ head["a_mid"],
        "out.b": dz_out.sum(axis=0),
    }
    da_mid = dz_out @ packed["out.w"]
    dz_mid = da_mid * nn.relu_grad(head["z_mid"])
    grads["mid.w"] = dz_mid.T @ head["d"]
    grads["mid.b"] = dz_mid.sum(axis=0)
    dd = dz_mid @ packed["mid.w"]
    grad_h = dd * masks if masks is not None else dd
    grads["wp"], grads["up"], grads["bp"] = _lstm_backward(cache, grad_h, hidden)
    return loss, grads


def group_loss_and_grads(
    group: nn.Params,
    xs: np.ndarray,
    labels: np.ndarray,
    hidden: int,
    masks: np.ndarray | None = None,
) -> tuple[float, nn.Params]:
    """Mean per-step BCE of one stack over a window, with all parameter grads."""
    packed = _pack_group(group)
    loss, packed_grads = _packed_loss_and_grads(packed, xs, labels, hidden, masks)
    grads = _unpack_grads(packed_grads["wp"], packed_grads["up"], packed_grads["bp"], hidden)
    for key in ("mid.w", "mid.b", "out.w", "out.b"):
        grads[key] = packed_grads[key]
    return loss, grads


def sequence_forward(
    model: SequenceModel,
    inputs: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-step class probabilities, shape (steps, 3).

    In separate mode column k comes from class k's stack. Dropout is active
    only in training mode (rng required then).
    """
    if inputs.ndim != 2 or inputs.shape[1] != model.input_dim:
        raise ValueError(f"inputs shape {inputs.shape} mismatches input_dim {model.input_dim}")
    steps = inputs.shape[0]
    out = np.empty((steps, 3))
    for k, name in enumerate(model.group_names()):
        group = model.groups[name]
        cache = _lstm_forward_cached(group, inputs, model.hidden)
        masks = None
        if training and model.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("training-mode forward needs an rng")
            masks = nn.dropout_mask(rng, (steps, model.hidden), model.dropout_rate)
        probs = _head_forward(group, cache["H"], masks)["probs"]
        if model.mode == "shared":
            return probs
        out[:, k] = probs[:, 0]
    return out


@dataclass(frozen=True)
class SeqTrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    seed: int = 0
    # one Adam update per sequence (batch size 1)


def _validate_sequences(sequences: Sequence[FeatureSequence], input_dim: int) -> int:
    if not sequences:
        raise ValueError("empty training set")
    window = len(sequences[0].records)
    for s in sequences:
        if len(s.records) != window:
            raise ValueError("sequences have inconsistent window lengths")
        for r in s.records:
            if r.features is None:
                raise ValueError(f"record {r.image_id} has no features")
            if r.features.shape[0] != input_dim:
                raise ValueError(
                    f"record {r.image_id}: feature dim {r.features.shape[0]} != {input_dim}"
                )
    return window


def bptt_train(
    model: SequenceModel,
    sequences: Sequence[FeatureSequence],
    config: SeqTrainConfig,
    val_sequences: Sequence[FeatureSequence] | None = None,
) -> list[dict[str, float]]:
    """Train with full backpropagation-through-time, one Adam update per
    sequence, shuffling per epoch with the seeded RNG; in place.

    Separate mode trains the three class stacks independently, each on its
    own label column with its own RNG stream split from the master seed.
    """
    _validate_sequences(sequences, model.input_dim)
    feats = [s.feature_matrix() for s in sequences]
    labs = [s.label_matrix() for s in sequences]
    val_feats = [s.feature_matrix() for s in val_sequences] if val_sequences else None
    val_labs = [s.label_matrix() for s in val_sequences] if val_sequences else None

    histories = []
    for k, name in enumerate(model.group_names()):
        group = model.groups[name]
        cols = slice(None) if model.mode == "shared" else slice(k, k + 1)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, k]))
        packed = _pack_group(group)
        state = nn.adam_init(packed, lr=config.lr)
        history = []
        for epoch in range(config.epochs):
            order = rng.permutation(len(sequences))
            total = 0.0
            for idx in order:
                xs = feats[idx]
                masks = (
                    nn.dropout_mask(rng, (xs.shape[0], model.hidden), model.dropout_rate)
                    if model.dropout_rate > 0.0
                    else None
                )
                loss, grads = _packed_loss_and_grads(
                    packed, xs, labs[idx][:, cols], model.hidden, masks
                )
                total += loss
                nn.adam_step(packed, grads, state)
            entry = {"epoch": float(epoch), "train_loss": total / len(sequences)}
            if val_feats is not None:
                vtotal = 0.0
                for xs, y in zip(val_feats, val_labs):
                    cache = _forward_packed(packed["wp"], packed["up"], packed["bp"], xs, model.hidden)
                    probs = _head_forward(packed, cache["H"], None)["probs"]
                    vloss, _ = nn.bce_loss(probs, y[:, cols])
                    vtotal += vloss
                entry["val_loss"] = vtotal / len(val_feats)
            history.append(entry)
        _write_back_group(group, packed, model.hidden)
        histories.append(history)

    # merge per-group histories into one per-epoch view
    merged = []
    for epoch in range(config.epochs):
        entry = {"epoch": float(epoch)}
        entry["train_loss"] = float(np.mean([h[epoch]["train_loss"] for h in histories]))
        if val_sequences:
            entry["val_loss"] = float(np.mean([h[epoch]["val_loss"] for h in histories]))
        merged.append(entry)
    return merged


def _batched_group_probs(group: nn.Params, windows: np.ndarray, hidden: int) -> np.ndarray:
    """Inference over a (batch, steps, input_dim) stack of windows at once."""
    wp, up, bp = _packed(group)
    b, steps, _ = windows.shape
    ux = windows @ up.T + bp
    h = np.zeros((b, hidden))
    c = np.zeros((b, hidden))
    hs = np.empty((b, steps, hidden))
    for t in range(steps):
        z = ux[:, t, :] + h @ wp.T
        zs = nn.sigmoid(z[:, : 3 * hidden])
        f = zs[:, :hidden]
        i = zs[:, hidden : 2 * hidden]
        o = zs[:, 2 * hidden :]
        u = np.tanh(z[:, 3 * hidden :])
        c = f * c + i * u
        h = o * np.tanh(c)
        hs[:, t, :] = h
    a_mid = nn.relu(hs @ group["mid.w"].T + group["mid.b"])
    return nn.sigmoid(a_mid @ group["out.w"].T + group["out.b"])


def predict_corridor(
    model: SequenceModel,
    records: Sequence[ImageRecord],
    window: int,
    threshold: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-image class probabilities and labels over contiguous runs.

    Each image's probability is the mean of its per-step probability over
    every stride-1 window containing it; a run shorter than the window gets
    one truncated pass. The label rule is strictly-above-threshold.
    """
    for r in records:
        if r.features is None:
            raise ValueError(f"record {r.image_id} has no features")
    probs = np.zeros((len(records), 3))
    chunk = 128  # bounds the batched-window working set
    for start, end in _runs(records):
        feats = np.stack([r.features for r in records[start:end]])
        n = end - start
        if n < window:
            probs[start:end] = _window_probs(model, feats[None, :, :])[0]
            continue
        n_windows = n - window + 1
        sums = np.zeros((n, 3))
        counts = np.zeros((n, 1))
        for chunk_start in range(0, n_windows, chunk):
            starts = range(chunk_start, min(chunk_start + chunk, n_windows))
            windows = np.stack([feats[s : s + window] for s in starts])
            window_probs = _window_probs(model, windows)
            for j, s in enumerate(starts):
                sums[s : s + window] += window_probs[j]
                counts[s : s + window] += 1.0
        probs[start:end] = sums / counts
    return probs, probs > threshold


def _window_probs(model: SequenceModel, windows: np.ndarray) -> np.ndarray:
    out = np.empty((windows.shape[0], windows.shape[1], 3))
    for k, name in enumerate(model.group_names()):
        group_probs = _batched_group_probs(model.groups[name], windows, model.hidden)
        if model.mode == "shared":
            return group_probs
        out[:, :, k] = group_probs[:, :, 0]
    return out


def seq_save(model: SequenceModel, path: str, seed: int | None = None) -> None:
    tensors = {}
    for name in model.group_names():
        for key, value in model.groups[name].items():
            tensors[f"{name}/{key}"] = value
    meta = {
        "kind": "sequence",
        "mode": model.mode,
        "hidden": model.hidden,
        "input_dim": model.input_dim,
        "mid_dim": model.mid_dim,
        "dropout_rate": model.dropout_rate,
        "seed": seed,
    }
    save_tensors(path, tensors, meta)


def seq_load(path: str) -> SequenceModel:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "sequence":
        raise ValueError(f"{path}: not a sequence model (kind={meta.get('kind')!r})")
    mode = meta["mode"]
    names = ("shared",) if mode == "shared" else CLASS_GROUPS
    groups: dict[str, nn.Params] = {name: {} for name in names}
    for full_key, value in tensors.items():
        name, key = full_key.split("/", 1)
        groups[name][key] = value
    return SequenceModel(
        mode=mode,
        hidden=int(meta["hidden"]),
        input_dim=int(meta["input_dim"]),
        mid_dim=int(meta["mid_dim"]),
        dropout_rate=float(meta["dropout_rate"]),
        groups=groups,
    )
