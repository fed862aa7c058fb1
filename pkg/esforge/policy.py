"""
Small autoregressive token policy with exact gradients.

Architecture (all arithmetic in float64, storage float32):
    x      = concat(E[w_1], ..., E[w_W])          window of the last W tokens,
                                                  left-padded with BOS
    h_0    = x
    h_l    = g_l * tanh(h_{l-1} @ W_l + b_l)      l = 1..layers (g_l: Norm gain)
    logits = h_L @ W_out + b_out
    p      = softmax(logits)

Batched entry points (forward_batch, generate_batch, weighted_logprob_grad)
do the work; the single-sequence operations are thin wrappers around them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from esforge.constants import TAG_INIT
from esforge.errors import ConfigurationError, VocabError, WindowError
from esforge.noise import NoiseStream, mix_seed, stream_create
from esforge.params import ParamGroup, ParamKind, ParamSet, ParamTensor

logger = logging.getLogger(__name__)

INIT_SCALE = 0.02

DEFAULT_TOKENS: Tuple[str, ...] = (
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "+", "-", "*",
    "<bos>", "<eos>", "<sep>",
    "b0", "b1",
)


@dataclass(frozen=True)
class Vocab:
    """Dense token vocabulary; ids are positions in `tokens`."""

    tokens: Tuple[str, ...] = DEFAULT_TOKENS

    def __post_init__(self) -> None:
        if len(self.tokens) > 24:
            raise ConfigurationError(f"vocab size must be <= 24, got {len(self.tokens)}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigurationError("vocab tokens must be unique")
        for marker in ("<bos>", "<eos>"):
            if marker not in self.tokens:
                raise ConfigurationError(f"vocab must contain {marker}")
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, symbol: str) -> int:
        try:
            return self._index[symbol]  # type: ignore[attr-defined]
        except KeyError:
            raise VocabError(f"unknown symbol: {symbol!r}") from None

    def symbol(self, token_id: int) -> str:
        self.check_ids([token_id])
        return self.tokens[token_id]

    @property
    def bos(self) -> int:
        return self.id("<bos>")

    @property
    def eos(self) -> int:
        return self.id("<eos>")

    @property
    def sep(self) -> int:
        return self.id("<sep>")

    def encode(self, symbols: Sequence[str]) -> List[int]:
        return [self.id(s) for s in symbols]

    def decode(self, ids: Sequence[int]) -> List[str]:
        self.check_ids(ids)
        return [self.tokens[i] for i in ids]

    def check_ids(self, ids: Union[Sequence[int], np.ndarray]) -> None:
        """Raise VocabError if any id is outside 0..size-1."""
        values = np.asarray(ids, dtype=np.int64).ravel()
        bad = values[(values < 0) | (values >= self.size)]
        if bad.size:
            raise VocabError(f"token id {int(bad[0])} outside vocabulary of size {self.size}")


DEFAULT_VOCAB = Vocab()


@dataclass(frozen=True)
class PolicyArch:
    """Policy dimensions."""

    vocab: Vocab = DEFAULT_VOCAB
    context_window: int = 24
    embed_dim: int = 16
    hidden_dim: int = 32
    layers: int = 1

    def __post_init__(self) -> None:
        for name in ("context_window", "embed_dim", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.layers not in (1, 2):
            raise ConfigurationError(f"layers must be 1 or 2, got {self.layers}")


def param_count(arch: PolicyArch) -> int:
    """Analytic parameter count of `arch`."""
    v, w, d, h = arch.vocab.size, arch.context_window, arch.embed_dim, arch.hidden_dim
    count = v * d + (w * d * h + 2 * h) + h * v + v
    if arch.layers == 2:
        count += h * h + 2 * h
    return count


def _layout(arch: PolicyArch) -> List[Tuple[str, ParamGroup, Tuple[int, ...]]]:
    v, w, d, h = arch.vocab.size, arch.context_window, arch.embed_dim, arch.hidden_dim
    layout = [("embed", ParamGroup(ParamKind.EMBEDDING, 0), (v, d))]
    fan_in = w * d
    for layer in range(arch.layers):
        prefix = f"hidden{layer}"
        layout.append((f"{prefix}.bias", ParamGroup(ParamKind.HIDDEN_BIAS, layer), (h,)))
        layout.append((f"{prefix}.norm", ParamGroup(ParamKind.NORM, layer), (h,)))
        layout.append((f"{prefix}.weight", ParamGroup(ParamKind.HIDDEN_WEIGHT, layer), (fan_in, h)))
        fan_in = h
    out_layer = arch.layers
    layout.append(("output.bias", ParamGroup(ParamKind.OUTPUT_BIAS, out_layer), (v,)))
    layout.append(("output.weight", ParamGroup(ParamKind.OUTPUT_WEIGHT, out_layer), (h, v)))
    return sorted(layout)


def zero_params(arch: PolicyArch) -> ParamSet:
    """All-zero parameters (uniform next-token distribution)."""
    return ParamSet(
        ParamTensor(name, group, shape, np.zeros(shape, dtype=np.float32))
        for name, group, shape in _layout(arch)
    )


def init_params(arch: PolicyArch, seed: int) -> ParamSet:
    """
    Seeded initialization: embeddings and weights ~ N(0, 0.02^2), biases 0,
    Norm gains 1. Deterministic in (arch, seed).
    """
    stream = stream_create(mix_seed(seed, TAG_INIT))
    tensors = []
    for name, group, shape in _layout(arch):
        if group.kind in (ParamKind.EMBEDDING, ParamKind.HIDDEN_WEIGHT, ParamKind.OUTPUT_WEIGHT):
            size = int(np.prod(shape))
            data = (INIT_SCALE * stream.gaussians(size)).astype(np.float32).reshape(shape)
        elif group.kind == ParamKind.NORM:
            data = np.ones(shape, dtype=np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        tensors.append(ParamTensor(name, group, shape, data))
    params = ParamSet(tensors)
    logger.debug(f"[policy] initialized {param_count(arch)} parameters from seed {seed}")
    return params


def infer_arch(params: ParamSet, vocab: Vocab = DEFAULT_VOCAB) -> PolicyArch:
    """
    Recover the architecture from tensor shapes.

    Raises:
        ConfigurationError: If params do not have the policy layout
    """
    try:
        v, d = params.array("embed").shape
        fan_in, h = params.array("hidden0.weight").shape
    except KeyError as e:
        raise ConfigurationError(f"params are not a policy: missing tensor {e}") from None
    if v != vocab.size:
        raise ConfigurationError(f"embedding has {v} rows, vocab has {vocab.size} tokens")
    layers = 2 if "hidden1.weight" in params else 1
    arch = PolicyArch(
        vocab=vocab, context_window=fan_in // d, embed_dim=d, hidden_dim=h, layers=layers
    )
    if params.structure() != _layout(arch):
        raise ConfigurationError("params do not match the policy layout")
    return arch


@dataclass
class Rollout:
    """A prompt and the tokens generated from it."""

    prompt: List[int]
    generated: List[int]
    logprobs: List[float]
    per_step_dists: Optional[List[np.ndarray]] = field(default=None, repr=False)

    @property
    def logprob(self) -> float:
        """Sequence log-probability (sum over steps)."""
        return float(np.sum(self.logprobs)) if self.logprobs else 0.0


class _Net:
    """float64 view of a ParamSet with batched forward and backward passes."""

    def __init__(self, params: ParamSet, vocab: Vocab):
        self.arch = infer_arch(params, vocab)
        self.vocab = vocab
        self.embed = params.array("embed").astype(np.float64)
        self.hidden = [
            (
                params.array(f"hidden{layer}.weight").astype(np.float64),
                params.array(f"hidden{layer}.bias").astype(np.float64),
                params.array(f"hidden{layer}.norm").astype(np.float64),
            )
            for layer in range(self.arch.layers)
        ]
        self.w_out = params.array("output.weight").astype(np.float64)
        self.b_out = params.array("output.bias").astype(np.float64)

    def context_table(self, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        """
        (S, W + max_len) token table: W BOS columns, then each sequence,
        BOS-filled on the right. Token p of row s sits in column W + p.
        """
        w = self.arch.context_window
        longest = max((len(s) for s in sequences), default=0)
        table = np.full((len(sequences), w + longest), self.vocab.bos, dtype=np.int64)
        for row, tokens in enumerate(sequences):
            if len(tokens):
                table[row, w : w + len(tokens)] = tokens
        self.vocab.check_ids(table)
        return table

    def windows(self, table: np.ndarray, rows: np.ndarray, ends: np.ndarray) -> np.ndarray:
        """The W tokens before position `ends[i]` of row `rows[i]`, BOS-padded."""
        offsets = np.arange(self.arch.context_window, dtype=np.int64)
        return table[rows[:, None], ends[:, None] + offsets]

    def forward(self, windows: np.ndarray) -> Tuple[np.ndarray, Dict]:
        """Logits for a (B, W) window batch plus the cache needed by backward."""
        x = self.embed[windows].reshape(len(windows), -1)
        inputs = [x]
        activations = []
        h = x
        for weight, bias, gain in self.hidden:
            t = np.tanh(h @ weight + bias)
            activations.append(t)
            h = gain * t
            inputs.append(h)
        logits = h @ self.w_out + self.b_out
        return logits, {"windows": windows, "inputs": inputs, "activations": activations}

    def backward(self, cache: Dict, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradient of sum(dlogits * logits) with respect to every tensor."""
        inputs, activations = cache["inputs"], cache["activations"]
        grads: Dict[str, np.ndarray] = {
            "output.weight": inputs[-1].T @ dlogits,
            "output.bias": dlogits.sum(axis=0),
        }
        dh = dlogits @ self.w_out.T
        for layer in reversed(range(len(self.hidden))):
            weight, _, gain = self.hidden[layer]
            t = activations[layer]
            grads[f"hidden{layer}.norm"] = (dh * t).sum(axis=0)
            da = dh * gain * (1.0 - t * t)
            grads[f"hidden{layer}.weight"] = inputs[layer].T @ da
            grads[f"hidden{layer}.bias"] = da.sum(axis=0)
            dh = da @ weight.T
        v, d = self.embed.shape
        slots = cache["windows"].reshape(-1, 1) * d + np.arange(d)
        grads["embed"] = np.bincount(
            slots.ravel(), weights=dh.ravel(), minlength=v * d
        ).reshape(v, d)
        return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax in float64."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward_batch(
    params: ParamSet,
    contexts: Sequence[Sequence[int]],
    vocab: Vocab = DEFAULT_VOCAB,
    strict: bool = True,
) -> np.ndarray:
    """
    Next-token distributions for many contexts at once.

    Args:
        params: Policy parameters
        contexts: Token lists
        vocab: Vocabulary the params were built for
        strict: Raise WindowError on contexts longer than the window instead
            of keeping the last W tokens

    Returns:
        (len(contexts), |V|) array of probabilities
    """
    net = _Net(params, vocab)
    if not contexts:
        return np.empty((0, vocab.size), dtype=np.float64)
    lengths = np.array([len(c) for c in contexts], dtype=np.int64)
    if strict and lengths.max() > net.arch.context_window:
        raise WindowError(
            f"context of {lengths.max()} tokens exceeds window {net.arch.context_window}"
        )
    table = net.context_table(contexts)
    logits, _ = net.forward(net.windows(table, np.arange(len(contexts)), lengths))
    return softmax(logits)


def forward_dist(
    params: ParamSet, context: Sequence[int], vocab: Vocab = DEFAULT_VOCAB
) -> np.ndarray:
    """
    Next-token distribution for one context.

    Raises:
        WindowError: If the context is longer than the context window
        VocabError: If a context token is outside the vocabulary
    """
    return forward_batch(params, [context], vocab)[0]


def generate_batch(
    params: ParamSet,
    prompts: Sequence[Sequence[int]],
    temperature: float,
    max_tokens: int,
    rng: Optional[NoiseStream] = None,
    vocab: Vocab = DEFAULT_VOCAB,
    record_dists: bool = False,
) -> List[Rollout]:
    """
    Decode every prompt until EOS or max_tokens.

    Temperature 0 takes the argmax of the logits (lowest id on ties). A
    positive temperature samples by inverse CDF from softmax(logits / T),
    drawing one uniform per still-active rollout per step, in prompt order.
    Recorded log-probs are under the untempered policy.

    Raises:
        ConfigurationError: Negative temperature, max_tokens < 1, or no rng
            for a positive temperature
    """
    if temperature < 0:
        raise ConfigurationError(f"temperature must be >= 0, got {temperature}")
    if max_tokens < 1:
        raise ConfigurationError(f"max_tokens must be >= 1, got {max_tokens}")
    if temperature > 0 and rng is None:
        raise ConfigurationError("sampling with temperature > 0 requires an rng stream")

    net = _Net(params, vocab)
    count = len(prompts)
    rollouts = [Rollout(list(p), [], [], [] if record_dists else None) for p in prompts]
    if not count:
        return rollouts
    table = net.context_table([r.prompt for r in rollouts])
    lengths = np.array([len(r.prompt) for r in rollouts], dtype=np.int64)
    context = net.windows(table, np.arange(count), lengths)
    generated = np.zeros((count, max_tokens), dtype=np.int64)
    logprobs = np.zeros((count, max_tokens), dtype=np.float64)
    steps = np.zeros(count, dtype=np.int64)

    active = np.arange(count)
    for step in range(max_tokens):
        if not active.size:
            break
        logits, _ = net.forward(context[active])
        logp = log_softmax(logits)
        if temperature == 0:
            tokens = np.argmax(logits, axis=1)
        else:
            # inverse CDF: index of the first cumulative probability above u
            cdf = np.cumsum(softmax(logits / temperature), axis=1)
            u = rng.uniforms(active.size)
            tokens = np.minimum((cdf <= u[:, None]).sum(axis=1), vocab.size - 1)
        generated[active, step] = tokens
        logprobs[active, step] = logp[np.arange(active.size), tokens]
        steps[active] += 1
        if record_dists:
            for row, i in enumerate(active):
                rollouts[i].per_step_dists.append(np.exp(logp[row]))
        context[active] = np.concatenate([context[active, 1:], tokens[:, None]], axis=1)
        active = active[tokens != vocab.eos]

    for i, rollout in enumerate(rollouts):
        rollout.generated = generated[i, : steps[i]].tolist()
        rollout.logprobs = logprobs[i, : steps[i]].tolist()
    return rollouts


def generate(
    params: ParamSet,
    prompt: Sequence[int],
    temperature: float,
    max_tokens: int,
    rng: Optional[NoiseStream] = None,
    vocab: Vocab = DEFAULT_VOCAB,
    record_dists: bool = False,
) -> Rollout:
    """Decode one prompt; see generate_batch."""
    return generate_batch(params, [prompt], temperature, max_tokens, rng, vocab, record_dists)[0]


def _positions(
    net: _Net, sequences: Sequence[Tuple[Sequence[int], Sequence[int]]]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(windows, target tokens, owning sequence index) for every output position."""
    table = net.context_table([list(prompt) + list(output) for prompt, output in sequences])
    prompt_lens = np.array([len(prompt) for prompt, _ in sequences], dtype=np.int64)
    output_lens = np.array([len(output) for _, output in sequences], dtype=np.int64)
    owners = np.repeat(np.arange(len(sequences), dtype=np.int64), output_lens)
    firsts = np.cumsum(output_lens) - output_lens
    ends = np.repeat(prompt_lens - firsts, output_lens) + np.arange(owners.size, dtype=np.int64)
    targets = table[owners, ends + net.arch.context_window]
    return net.windows(table, owners, ends), targets, owners


def sequence_logprobs(
    params: ParamSet,
    sequences: Sequence[Tuple[Sequence[int], Sequence[int]]],
    vocab: Vocab = DEFAULT_VOCAB,
) -> np.ndarray:
    """Summed log-probability of each (prompt, output) pair, no gradient."""
    net = _Net(params, vocab)
    windows, targets, owners = _positions(net, sequences)
    totals = np.zeros(len(sequences), dtype=np.float64)
    if len(targets):
        logits, _ = net.forward(windows)
        np.add.at(totals, owners, log_softmax(logits)[np.arange(len(targets)), targets])
    return totals


def weighted_logprob_grad(
    params: ParamSet,
    sequences: Sequence[Tuple[Sequence[int], Sequence[int]]],
    weights: Union[Sequence[float], Callable[[np.ndarray], Sequence[float]]],
    vocab: Vocab = DEFAULT_VOCAB,
) -> Tuple[np.ndarray, ParamSet]:
    """
    Per-sequence log-probabilities and the gradient of sum_i w_i log p_i.

    Args:
        params: Policy parameters
        sequences: (prompt, output) token lists
        weights: One weight per sequence, or a function mapping the
            per-sequence log-probs to weights (one forward pass serves both)
        vocab: Vocabulary

    Returns:
        (log-probs array, float64 gradient ParamSet shaped like params)

    Raises:
        VocabError: If any token is outside the vocabulary
    """
    if not callable(weights) and len(weights) != len(sequences):
        raise ConfigurationError(
            f"{len(weights)} weights given for {len(sequences)} sequences"
        )
    net = _Net(params, vocab)
    windows, targets, owners = _positions(net, sequences)
    grad = params.zeros_like(np.float64)
    totals = np.zeros(len(sequences), dtype=np.float64)
    if not len(targets):
        return totals, grad

    logits, cache = net.forward(windows)
    logp = log_softmax(logits)
    rows = np.arange(len(targets))
    np.add.at(totals, owners, logp[rows, targets])

    if callable(weights):
        weights = weights(totals)
    w = np.asarray(weights, dtype=np.float64)[owners]
    dlogits = -np.exp(logp) * w[:, None]
    dlogits[rows, targets] += w
    for name, value in net.backward(cache, dlogits).items():
        grad.array(name)[...] = value
    return totals, grad


def logprob_and_grad(
    params: ParamSet,
    prompt: Sequence[int],
    output: Sequence[int],
    vocab: Vocab = DEFAULT_VOCAB,
) -> Tuple[float, ParamSet]:
    """
    Sequence log-probability of `output` after `prompt` and its exact gradient.

    Raises:
        VocabError: If any token is outside the vocabulary
    """
    totals, grad = weighted_logprob_grad(params, [(prompt, output)], [1.0], vocab)
    return float(totals[0]), grad
