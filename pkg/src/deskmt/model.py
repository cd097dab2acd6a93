"""Attentional encoder-decoder: bi-directional LSTM encoder, MLP attention,
LSTM decoder with softmax output, plus the dropout and lexicon-bias
extensions.

All forward passes are built on the autodiff tape, batched over sentences
(training) or over beam hypotheses (decoding). Weight matrices are stored
input-major, so activations compose as ``x @ W``; LSTM gate columns are laid
out [input, forget, cell, output] for serialization stability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tape, Var
from .corpus import EOS_ID, Vocabulary
from .lexicon import TranslationTable

INIT_SCALE = 0.1
ATTENTION_MASK = -1e9


@dataclass
class LexiconBias:
    """Dense p(target id | source id) rows plus the additive-bias floor."""

    rows: np.ndarray  # (src vocab, tgt vocab)
    epsilon: float = 1e-6


def make_lexicon_bias(
    table: TranslationTable,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    epsilon: float = 1e-6,
) -> LexiconBias:
    rows = np.zeros((len(src_vocab), len(tgt_vocab)))
    for source, row in table.t.items():
        i = src_vocab.id_of.get(source)
        if i is None:
            continue
        for target, prob in row.items():
            j = tgt_vocab.id_of.get(target)
            if j is not None:
                rows[i, j] += prob
    return LexiconBias(rows, epsilon)


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    embed_size: int = 32
    hidden_size: int = 64
    attention_size: int = 64
    dropout: float = 0.0
    lexicon_bias: LexiconBias | None = None
    seed: int = 1

    def scalar_fields(self) -> dict[str, str]:
        return {
            "src_vocab_size": str(self.src_vocab_size),
            "tgt_vocab_size": str(self.tgt_vocab_size),
            "embed_size": str(self.embed_size),
            "hidden_size": str(self.hidden_size),
            "attention_size": str(self.attention_size),
            "dropout": repr(self.dropout),
            "seed": str(self.seed),
        }


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    e, h, a = cfg.embed_size, cfg.hidden_size, cfg.attention_size
    return [
        ("src_embed", (cfg.src_vocab_size, e)),
        ("tgt_embed", (cfg.tgt_vocab_size, e)),
        ("enc_fwd_w", (e, 4 * h)),
        ("enc_fwd_u", (h, 4 * h)),
        ("enc_fwd_b", (4 * h,)),
        ("enc_bwd_w", (e, 4 * h)),
        ("enc_bwd_u", (h, 4 * h)),
        ("enc_bwd_b", (4 * h,)),
        ("dec_w", (e + 2 * h, 4 * h)),
        ("dec_u", (h, 4 * h)),
        ("dec_b", (4 * h,)),
        ("att_enc", (2 * h, a)),
        ("att_dec", (h, a)),
        ("att_v", (a,)),
        ("init_w", (h, h)),
        ("init_b", (h,)),
        ("out_w", (h, cfg.tgt_vocab_size)),
        ("out_b", (cfg.tgt_vocab_size,)),
    ]


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def init_params(config: ModelConfig) -> ModelParams:
    """Uniform [-0.1, 0.1] weights, zero biases, deterministic in the seed."""
    rng = np.random.default_rng(config.seed)
    arrays = {}
    for name, shape in _param_shapes(config):
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
    return ModelParams(config, arrays)


@dataclass
class StepOutput:
    distribution: np.ndarray
    attention: np.ndarray | None
    state: tuple[np.ndarray, np.ndarray]


# ---------------------------------------------------------------------------
# Graph builders. Everything below takes a tape plus bound parameter Vars and
# returns Vars; the public wrappers extract values.
# ---------------------------------------------------------------------------


def _bind(tape: Tape, params: ModelParams, trainable: bool) -> dict[str, Var]:
    return {
        name: tape.leaf(arr, trainable=trainable, name=name)
        for name, arr in params.arrays.items()
    }


@dataclass
class _DropoutMasks:
    """One inverted-dropout mask per sequence, reused at every time step."""

    enc_fwd: tuple[Var, Var] | None = None
    enc_bwd: tuple[Var, Var] | None = None
    dec: tuple[Var, Var] | None = None
    out: Var | None = None
    raw: dict[str, np.ndarray] = field(default_factory=dict)


def _sample_masks(tape, cfg: ModelConfig, batch: int, rng) -> _DropoutMasks:
    rate = cfg.dropout
    masks = _DropoutMasks()
    if rate <= 0.0:
        return masks

    def draw(name, dim):
        keep = (rng.random((batch, dim)) >= rate) / (1.0 - rate)
        masks.raw[name] = keep
        return tape.constant(keep)

    e, h = cfg.embed_size, cfg.hidden_size
    masks.enc_fwd = (draw("enc_fwd_x", e), draw("enc_fwd_h", h))
    masks.enc_bwd = (draw("enc_bwd_x", e), draw("enc_bwd_h", h))
    masks.dec = (draw("dec_x", e + 2 * h), draw("dec_h", h))
    masks.out = draw("out", h)
    return masks


def _lstm(tape, p, prefix, x, h, c, mask=None):
    if mask is not None:
        x = x * mask[0]
        h_in = h * mask[1]
    else:
        h_in = h
    gates = x @ p[f"{prefix}_w"] + h_in @ p[f"{prefix}_u"] + p[f"{prefix}_b"]
    hd = h.value.shape[-1]
    i = tape.sigmoid(tape.slice(gates, 1, 0, hd))
    f = tape.sigmoid(tape.slice(gates, 1, hd, 2 * hd))
    g = tape.tanh(tape.slice(gates, 1, 2 * hd, 3 * hd))
    o = tape.sigmoid(tape.slice(gates, 1, 3 * hd, 4 * hd))
    c_next = f * c + i * g
    h_next = o * tape.tanh(c_next)
    return h_next, c_next


def _encode_graph(tape, p, cfg, src: np.ndarray, lengths: np.ndarray, masks):
    """Bi-directional encoder over padded ids (B, T); returns per-position
    concatenated states [(B, 2h)] and the final backward state (B, h)."""
    batch, steps = src.shape
    h = cfg.hidden_size
    zeros = tape.constant(np.zeros((batch, h)))
    ragged = bool((lengths < steps).any())
    keep = {}
    if ragged:
        for t in range(steps):
            m = (lengths > t).astype(float).reshape(batch, 1)
            keep[t] = (tape.constant(m), tape.constant(1.0 - m))

    def run(prefix, order, mask):
        h_cur, c_cur = zeros, zeros
        states = {}
        for t in order:
            x = tape.gather(p["src_embed"], src[:, t])
            h_new, c_new = _lstm(tape, p, prefix, x, h_cur, c_cur, mask)
            if ragged:
                m, inv = keep[t]
                h_cur = m * h_new + inv * h_cur
                c_cur = m * c_new + inv * c_cur
            else:
                h_cur, c_cur = h_new, c_new
            states[t] = h_cur
        return states, h_cur

    fwd, _ = run("enc_fwd", range(steps), masks.enc_fwd)
    bwd, bwd_final = run("enc_bwd", range(steps - 1, -1, -1), masks.enc_bwd)
    enc = [tape.concat([fwd[t], bwd[t]], axis=1) for t in range(steps)]
    return enc, bwd_final


def _initial_state(tape, p, cfg, bwd_final):
    batch = bwd_final.value.shape[0]
    s0 = bwd_final @ p["init_w"] + p["init_b"]
    c0 = tape.constant(np.zeros((batch, cfg.hidden_size)))
    return s0, c0


def _attend_graph(tape, p, s, enc, keys, score_mask=None):
    """MLP attention: score_t = v . tanh(W_e h_t + W_d s), softmax over t.

    `s` is (N, h); encoder Vars may be (N, ...) or (1, ...) and broadcast.
    Returns (context (N, 2h), weights (N, T)).
    """
    n = s.value.shape[0]
    q = s @ p["att_dec"]
    columns = []
    for key in keys:
        e = tape.tanh(key + q)
        columns.append(tape.reshape(e @ p["att_v"], (n, 1)))
    scores = columns[0] if len(columns) == 1 else tape.concat(columns, axis=1)
    if score_mask is not None:
        scores = scores + score_mask
    weights = tape.softmax(scores)
    context = None
    for t, state in enumerate(enc):
        term = tape.slice(weights, 1, t, t + 1) * state
        context = term if context is None else context + term
    return context, weights


def _precompute_keys(p, enc):
    return [state @ p["att_enc"] for state in enc]


def _pad_batch(pairs) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pad id lists into (B, T) matrices plus length vectors."""
    batch = len(pairs)
    src_len = np.array([len(src) for src, _ in pairs], dtype=np.intp)
    tgt_len = np.array([len(tgt) + 1 for _, tgt in pairs], dtype=np.intp)  # + EOS
    src = np.zeros((batch, src_len.max()), dtype=np.intp)
    tgt = np.zeros((batch, tgt_len.max()), dtype=np.intp)
    for b, (s, t) in enumerate(pairs):
        src[b, : len(s)] = s
        tgt[b, : len(t)] = t
        tgt[b, len(t)] = EOS_ID
    return src, src_len, tgt, tgt_len


def _validate_ids(ids, limit, what):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= limit):
        raise ValueError(f"{what} id out of range [0, {limit})")


def _loss_graph(params: ModelParams, pairs, train: bool, rng=None, debug=None):
    """Build the teacher-forced sum-NLL graph for a batch of id pairs."""
    cfg = params.config
    tape = Tape()
    p = _bind(tape, params, trainable=True)
    src, src_len, tgt, tgt_len = _pad_batch(pairs)
    _validate_ids(src, cfg.src_vocab_size, "source")
    _validate_ids(tgt, cfg.tgt_vocab_size, "target")
    batch, src_steps = src.shape
    tgt_steps = tgt.shape[1]

    masks = _sample_masks(tape, cfg, batch, rng) if train and cfg.dropout > 0 else _DropoutMasks()
    if debug is not None:
        debug["masks"] = masks.raw

    enc, bwd_final = _encode_graph(tape, p, cfg, src, src_len, masks)
    keys = _precompute_keys(p, enc)
    score_mask = None
    if (src_len < src_steps).any():
        pad = np.where(np.arange(src_steps)[None, :] < src_len[:, None], 0.0, ATTENTION_MASK)
        score_mask = tape.constant(pad)

    s, c = _initial_state(tape, p, cfg, bwd_final)
    prev = np.full(batch, EOS_ID, dtype=np.intp)
    states, attentions = [], []
    bias = cfg.lexicon_bias
    for t in range(tgt_steps):
        context, att = _attend_graph(tape, p, s, enc, keys, score_mask)
        x = tape.concat([tape.gather(p["tgt_embed"], prev), context], axis=1)
        s, c = _lstm(tape, p, "dec", x, s, c, masks.dec)
        out_in = s * masks.out if masks.out is not None else s
        states.append(out_in)
        attentions.append(att)
        prev = tgt[:, t]

    stacked = states[0] if len(states) == 1 else tape.concat(states, axis=0)
    logits = stacked @ p["out_w"] + p["out_b"]
    if bias is not None:
        att_stack = attentions[0] if len(attentions) == 1 else tape.concat(attentions, axis=0)
        tables = bias.rows[src]  # (B, Ts, V)
        mixed = tape.attention_bias(att_stack, tables)
        floored = mixed + tape.constant(np.asarray(bias.epsilon))
        logits = logits + tape.log(floored)

    # step-major flattening: row t * batch + b
    targets = tgt.T.reshape(-1)
    weights = (np.arange(tgt_steps)[:, None] < tgt_len[None, :]).astype(float).reshape(-1)
    loss = tape.cross_entropy(logits, targets, weights)
    return tape, loss, int(tgt_len.sum())


def batch_loss(
    params: ModelParams,
    pairs,
    train: bool = True,
    rng=None,
    debug: dict | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Sum of per-token NLL over the batch (teacher forcing, sentence-end
    included) and its gradients for every parameter."""
    if not pairs:
        raise ValueError("batch_loss needs a non-empty batch")
    tape, loss, _ = _loss_graph(params, pairs, train, rng, debug)
    value = float(loss.value)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite loss on batch")
    return value, tape.backward(loss)


def batch_nll(params: ModelParams, pairs) -> tuple[float, int]:
    """Total NLL and target token count (sentence-end included), dropout off."""
    if not pairs:
        return 0.0, 0
    tape, loss, tokens = _loss_graph(params, pairs, train=False)
    return float(loss.value), tokens


# ---------------------------------------------------------------------------
# Single-sentence surfaces.
# ---------------------------------------------------------------------------


def encode(params: ModelParams, source_ids, dropout_mode: str = "infer", rng=None) -> np.ndarray:
    """Per-position concatenation of forward and backward states, (T, 2h)."""
    if not len(source_ids):
        raise ValueError("cannot encode an empty sentence")
    _validate_ids(source_ids, params.config.src_vocab_size, "source")
    cfg = params.config
    tape = Tape()
    p = _bind(tape, params, trainable=False)
    src = np.asarray(source_ids, dtype=np.intp).reshape(1, -1)
    train = dropout_mode == "train"
    masks = _sample_masks(tape, cfg, 1, rng) if train and cfg.dropout > 0 else _DropoutMasks()
    enc, _ = _encode_graph(tape, p, cfg, src, np.array([src.shape[1]]), masks)
    return np.stack([state.value[0] for state in enc])


def attend(params: ModelParams, state: np.ndarray, encoder_states: np.ndarray):
    """Context vector and attention weights for one decoder state."""
    if not len(encoder_states):
        raise ValueError("attend needs at least one encoder state")
    tape = Tape()
    p = _bind(tape, params, trainable=False)
    s = tape.constant(np.asarray(state).reshape(1, -1))
    enc = [tape.constant(row.reshape(1, -1)) for row in np.asarray(encoder_states)]
    keys = _precompute_keys(p, enc)
    context, weights = _attend_graph(tape, p, s, enc, keys)
    return context.value[0], weights.value[0]


def initial_state(params: ModelParams, encoder_states: np.ndarray):
    """Decoder start state: affine transform of the final backward state."""
    h = params.config.hidden_size
    bwd_final = np.asarray(encoder_states)[0, h:]
    s0 = bwd_final @ params.arrays["init_w"] + params.arrays["init_b"]
    return s0, np.zeros(h)


def decode_step(
    params: ModelParams,
    prev_id: int,
    state: tuple[np.ndarray, np.ndarray],
    context: np.ndarray,
    attention: np.ndarray | None = None,
    source_ids=None,
) -> StepOutput:
    """One decoder update from [embedding(prev), context]; softmax output.

    `attention` (and `source_ids`, when the lexicon bias is on) carry the
    weights produced by `attend` for the same step.
    """
    cfg = params.config
    tape = Tape()
    p = _bind(tape, params, trainable=False)
    x = tape.concat(
        [
            tape.gather(p["tgt_embed"], np.array([prev_id], dtype=np.intp)),
            tape.constant(np.asarray(context).reshape(1, -1)),
        ],
        axis=1,
    )
    s = tape.constant(np.asarray(state[0]).reshape(1, -1))
    c = tape.constant(np.asarray(state[1]).reshape(1, -1))
    s2, c2 = _lstm(tape, p, "dec", x, s, c)
    logits = s2 @ p["out_w"] + p["out_b"]
    if cfg.lexicon_bias is not None:
        if attention is None or source_ids is None:
            raise ValueError("lexicon bias needs the attention weights and source ids")
        att = tape.constant(np.asarray(attention).reshape(1, -1))
        tables = cfg.lexicon_bias.rows[np.asarray(source_ids, dtype=np.intp)][None, :, :]
        mixed = tape.attention_bias(att, tables) + tape.constant(
            np.asarray(cfg.lexicon_bias.epsilon)
        )
        logits = logits + tape.log(mixed)
    dist = tape.softmax(logits)
    return StepOutput(dist.value[0], attention, (s2.value[0], c2.value[0]))


def step(
    params: ModelParams,
    prev_id: int,
    state: tuple[np.ndarray, np.ndarray],
    encoder_states: np.ndarray,
    source_ids=None,
) -> StepOutput:
    """attend + decode_step for one hypothesis."""
    context, weights = attend(params, state[0], encoder_states)
    out = decode_step(params, prev_id, state, context, weights, source_ids)
    return out


class Stepper:
    """Incremental decoder over one source sentence, batched over hypotheses.

    Encodes once at construction; each `step` call advances N hypothesis
    states in a single tape. Used by beam search, including ensembles where
    each member owns a Stepper.
    """

    def __init__(self, params: ModelParams, source_ids):
        if not len(source_ids):
            raise ValueError("cannot decode an empty sentence")
        _validate_ids(source_ids, params.config.src_vocab_size, "source")
        self.params = params
        self.cfg = params.config
        self.source_ids = np.asarray(source_ids, dtype=np.intp)
        tape = Tape()
        p = _bind(tape, params, trainable=False)
        src = self.source_ids.reshape(1, -1)
        enc, bwd_final = _encode_graph(
            tape, p, self.cfg, src, np.array([src.shape[1]]), _DropoutMasks()
        )
        keys = _precompute_keys(p, enc)
        s0, c0 = _initial_state(tape, p, self.cfg, bwd_final)
        self.enc = [state.value for state in enc]
        self.keys = [key.value for key in keys]
        self.start_state = (s0.value, c0.value)
        if self.cfg.lexicon_bias is not None:
            self.bias_tables = self.cfg.lexicon_bias.rows[self.source_ids][None, :, :]
        else:
            self.bias_tables = None

    def start(self, n: int = 1):
        s0, c0 = self.start_state
        return np.repeat(s0, n, axis=0), np.repeat(c0, n, axis=0)

    def step(self, states, prev_ids):
        """Advance N hypotheses; returns (dist (N,V), att (N,Ts), new states)."""
        tape = Tape()
        p = _bind(tape, self.params, trainable=False)
        s = tape.constant(states[0])
        c = tape.constant(states[1])
        enc = [tape.constant(v) for v in self.enc]
        keys = [tape.constant(v) for v in self.keys]
        context, att = _attend_graph(tape, p, s, enc, keys)
        x = tape.concat(
            [tape.gather(p["tgt_embed"], np.asarray(prev_ids, dtype=np.intp)), context],
            axis=1,
        )
        s2, c2 = _lstm(tape, p, "dec", x, s, c)
        logits = s2 @ p["out_w"] + p["out_b"]
        if self.bias_tables is not None:
            mixed = tape.attention_bias(att, self.bias_tables) + tape.constant(
                np.asarray(self.cfg.lexicon_bias.epsilon)
            )
            logits = logits + tape.log(mixed)
        dist = tape.softmax(logits)
        return dist.value, att.value, (s2.value, c2.value)


# ---------------------------------------------------------------------------
# Checkpoints: parameter container plus a UTF-8 key=value sidecar.
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, extra: dict[str, str] | None = None) -> None:
    autodiff.save_arrays(path, params.arrays)
    meta = dict(params.config.scalar_fields())
    meta["lexicon_bias"] = "on" if params.config.lexicon_bias is not None else "off"
    if params.config.lexicon_bias is not None:
        meta["lexicon_bias_epsilon"] = repr(params.config.lexicon_bias.epsilon)
    meta.update(extra or {})
    with open(f"{path}.meta", "w", encoding="utf-8") as fh:
        for key in sorted(meta):
            fh.write(f"{key}={meta[key]}\n")


def load_checkpoint(path, lexicon_bias: LexiconBias | None = None):
    """Returns (ModelParams, metadata dict). The lexicon bias, when the
    checkpoint was trained with one, must be supplied by the caller since the
    table lives in its own artifact."""
    arrays = autodiff.load_arrays(path)
    meta = {}
    with open(f"{path}.meta", encoding="utf-8") as fh:
        for line in fh:
            key, _, value = line.rstrip("\n").partition("=")
            meta[key] = value
    cfg = ModelConfig(
        src_vocab_size=int(meta["src_vocab_size"]),
        tgt_vocab_size=int(meta["tgt_vocab_size"]),
        embed_size=int(meta["embed_size"]),
        hidden_size=int(meta["hidden_size"]),
        attention_size=int(meta["attention_size"]),
        dropout=float(meta["dropout"]),
        lexicon_bias=lexicon_bias,
        seed=int(meta["seed"]),
    )
    return ModelParams(cfg, arrays), meta
