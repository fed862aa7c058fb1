"""Tests for esforge.policy."""

import math

import numpy as np
import pytest

from esforge.errors import ConfigurationError, VocabError, WindowError
from esforge.noise import stream_create
from esforge.params import ParamSet
from esforge.policy import (
    DEFAULT_VOCAB,
    PolicyArch,
    Vocab,
    forward_batch,
    forward_dist,
    generate,
    generate_batch,
    infer_arch,
    init_params,
    logprob_and_grad,
    param_count,
    sequence_logprobs,
    weighted_logprob_grad,
    zero_params,
)
from esforge.tasks import gen_countdown

V = DEFAULT_VOCAB
EOS = V.eos


def _oracle_dist(params: ParamSet, context, arch: PolicyArch):
    """Straight-line forward pass with Python loops."""
    w, d, h = arch.context_window, arch.embed_dim, arch.hidden_dim
    window = [V.bos] * (w - len(context)) + list(context)
    embed = params.array("embed")
    x = [float(embed[token, j]) for token in window for j in range(d)]
    weight = params.array("hidden0.weight")
    bias = params.array("hidden0.bias")
    gain = params.array("hidden0.norm")
    hidden = []
    for k in range(h):
        a = float(bias[k]) + sum(x[i] * float(weight[i, k]) for i in range(len(x)))
        hidden.append(float(gain[k]) * math.tanh(a))
    out_w = params.array("output.weight")
    out_b = params.array("output.bias")
    logits = [
        float(out_b[v]) + sum(hidden[k] * float(out_w[k, v]) for k in range(h))
        for v in range(V.size)
    ]
    top = max(logits)
    exps = [math.exp(value - top) for value in logits]
    total = sum(exps)
    return [e / total for e in exps]


def _shifted(params: ParamSet, name: str, index, delta: float) -> ParamSet:
    copy = params.deep_copy()
    copy.array(name)[index] += delta
    return copy


def _coordinates(params: ParamSet, per_tensor: int, seed: int):
    rng = np.random.default_rng(seed)
    coords = []
    for tensor in params:
        flat = rng.permutation(tensor.size)[:per_tensor]
        coords.extend((tensor.name, np.unravel_index(int(i), tensor.shape)) for i in flat)
    return coords


def _assert_grad_matches_fd(grad, f, params, coords, h=1e-4):
    for name, index in coords:
        plus = f(_shifted(params, name, index, h))
        minus = f(_shifted(params, name, index, -h))
        fd = (plus - minus) / (2 * h)
        analytic = float(grad.array(name)[index])
        assert abs(fd - analytic) <= 1e-4 * max(abs(fd), abs(analytic)) + 1e-7, (
            f"{name}{index}: finite difference {fd} vs analytic {analytic}"
        )


class TestVocab:
    """Token vocabulary."""

    def test_default_vocab(self):
        """18 tokens with the special markers."""
        assert V.size == 18
        assert V.symbol(V.bos) == "<bos>"
        assert V.decode(V.encode(["1", "+", "2"])) == ["1", "+", "2"]

    def test_out_of_range_id(self):
        """Ids outside 0..|V|-1 raise VocabError."""
        with pytest.raises(VocabError):
            V.check_ids([18])
        with pytest.raises(VocabError):
            V.id("?")

    def test_vocab_too_large(self):
        """At most 24 tokens."""
        with pytest.raises(ConfigurationError):
            Vocab(tuple(f"t{i}" for i in range(23)) + ("<bos>", "<eos>"))


class TestArchitecture:
    """Layout, initialization and parameter counting."""

    def test_param_count_matches_layout(self, tiny_arch, tiny_params):
        """Analytic count equals the allocated size."""
        assert param_count(tiny_arch) == tiny_params.size

    def test_two_layer_count(self):
        """Second hidden layer adds H*H + 2H."""
        one = PolicyArch(layers=1)
        two = PolicyArch(layers=2)
        assert param_count(two) - param_count(one) == 32 * 32 + 2 * 32
        assert init_params(two, 0).size == param_count(two)

    def test_init_deterministic(self, tiny_arch):
        """Same seed, same parameters."""
        assert init_params(tiny_arch, 5).bitwise_equal(init_params(tiny_arch, 5))
        assert not init_params(tiny_arch, 5).bitwise_equal(init_params(tiny_arch, 6))

    def test_init_values(self, tiny_params):
        """Biases start at 0 and Norm gains at 1."""
        assert np.all(tiny_params.array("hidden0.bias") == 0)
        assert np.all(tiny_params.array("hidden0.norm") == 1)
        assert np.all(tiny_params.array("output.bias") == 0)
        assert 0 < np.std(tiny_params.array("hidden0.weight")) < 0.05

    def test_infer_arch(self, tiny_arch, tiny_params):
        """The architecture is recovered from shapes."""
        assert infer_arch(tiny_params) == tiny_arch

    def test_bad_layers(self):
        """Only one or two hidden layers."""
        with pytest.raises(ConfigurationError):
            PolicyArch(layers=3)


class TestForward:
    """Next-token distributions."""

    def test_zero_params_uniform(self, tiny_arch):
        """Zero parameters give 1/|V| everywhere."""
        dist = forward_dist(zero_params(tiny_arch), [1, 2, 3])
        np.testing.assert_allclose(dist, np.full(V.size, 1 / V.size), atol=1e-12)

    def test_distribution_normalized(self, rough_params):
        """Probabilities sum to 1."""
        dists = forward_batch(rough_params, [[], [4], list(range(10))])
        np.testing.assert_allclose(dists.sum(axis=1), 1.0, atol=1e-6)

    def test_matches_loop_oracle(self, tiny_arch, rough_params):
        """Vectorised forward equals the straight-line oracle."""
        for context in ([], [16, 17, 16, 15], list(gen_countdown(3).prompt_tokens)):
            np.testing.assert_allclose(
                forward_dist(rough_params, context), _oracle_dist(rough_params, context, tiny_arch),
                atol=1e-6,
            )

    def test_output_bias_shift_invariance(self, rough_params):
        """Adding one constant to every output bias leaves the distribution unchanged."""
        shifted = rough_params.deep_copy()
        shifted.array("output.bias")[...] += 5.0
        contexts = [[], [4], list(gen_countdown(6).prompt_tokens)]
        np.testing.assert_allclose(
            forward_batch(shifted, contexts), forward_batch(rough_params, contexts),
            rtol=1e-12, atol=1e-14,
        )

    def test_window_overflow_strict(self, tiny_params):
        """Contexts longer than W raise WindowError."""
        with pytest.raises(WindowError):
            forward_dist(tiny_params, [1] * 13)

    def test_window_sliding_when_not_strict(self, tiny_params):
        """Non-strict forward keeps the last W tokens."""
        long = list(range(15))
        sliding = forward_batch(tiny_params, [long], strict=False)[0]
        np.testing.assert_array_equal(sliding, forward_dist(tiny_params, long[-12:]))

    def test_bad_token(self, tiny_params):
        """Context ids outside the vocabulary raise VocabError."""
        with pytest.raises(VocabError):
            forward_dist(tiny_params, [99])


class TestGenerate:
    """Decoding."""

    def test_greedy_deterministic(self, tiny_params):
        """Temperature 0 twice gives identical rollouts."""
        prompt = list(gen_countdown(1).prompt_tokens)
        a = generate(tiny_params, prompt, 0.0, 8)
        b = generate(tiny_params, prompt, 0.0, 8)
        assert a.generated == b.generated
        assert a.logprobs == b.logprobs

    def test_greedy_picks_unique_max(self, tiny_arch):
        """A dominant output bias is always emitted."""
        params = zero_params(tiny_arch)
        params.array("output.bias")[5] = 3.0
        rollout = generate(params, [1], 0.0, 4)
        assert rollout.generated == [5, 5, 5, 5]

    def test_stops_at_eos(self, tiny_arch):
        """Decoding stops after EOS."""
        params = zero_params(tiny_arch)
        params.array("output.bias")[EOS] = 3.0
        rollout = generate(params, [1], 0.0, 4)
        assert rollout.generated == [EOS]
        assert len(rollout.logprobs) == 1

    def test_sampling_matches_inverse_cdf_oracle(self, rough_params):
        """Temperature 1 sampling equals inverse-CDF draws on forward_dist."""
        prompt = list(gen_countdown(2).prompt_tokens)
        rollout = generate(rough_params, prompt, 1.0, 8, rng=stream_create(31))

        oracle_rng = stream_create(31)
        context, expected = list(prompt), []
        for _ in range(8):
            cdf = np.cumsum(forward_batch(rough_params, [context], strict=False)[0])
            u = oracle_rng.next_uniform()
            token = min(int(np.searchsorted(cdf, u, side="right")), V.size - 1)
            expected.append(token)
            context.append(token)
            if token == EOS:
                break
        assert rollout.generated == expected

    def test_greedy_invariant_to_logit_rescaling(self, rough_params):
        """Doubling the output layer doubles every logit and keeps greedy decoding."""
        scaled = rough_params.deep_copy()
        scaled.array("output.weight")[...] *= 2.0
        scaled.array("output.bias")[...] *= 2.0
        prompts = [list(gen_countdown(s).prompt_tokens) for s in range(6)]
        original = generate_batch(rough_params, prompts, 0.0, 8)
        rescaled = generate_batch(scaled, prompts, 0.0, 8)
        assert [r.generated for r in original] == [r.generated for r in rescaled]

    def test_batched_sampling_matches_per_step_oracle(self, rough_params):
        """One uniform per active rollout per step, in prompt order."""
        prompts = [list(gen_countdown(s).prompt_tokens) for s in range(5)]
        rollouts = generate_batch(rough_params, prompts, 1.0, 6, rng=stream_create(44))

        oracle_rng = stream_create(44)
        contexts = [list(p) for p in prompts]
        outputs = [[] for _ in prompts]
        active = list(range(len(prompts)))
        for _ in range(6):
            if not active:
                break
            dists = forward_batch(rough_params, [contexts[i] for i in active], strict=False)
            u = oracle_rng.uniforms(len(active))
            still = []
            for row, i in enumerate(active):
                cdf = np.cumsum(dists[row])
                token = min(int(np.searchsorted(cdf, u[row], side="right")), V.size - 1)
                outputs[i].append(token)
                contexts[i].append(token)
                if token != EOS:
                    still.append(i)
            active = still
        assert [r.generated for r in rollouts] == outputs

    def test_sampling_needs_rng(self, tiny_params):
        """A positive temperature without an rng is an error."""
        with pytest.raises(ConfigurationError):
            generate(tiny_params, [1], 1.0, 4)

    @pytest.mark.parametrize("temperature,max_tokens", [(-0.1, 4), (0.0, 0)])
    def test_bad_arguments(self, tiny_params, temperature, max_tokens):
        """Negative temperature and max_tokens < 1 are rejected."""
        with pytest.raises(ConfigurationError):
            generate(tiny_params, [1], temperature, max_tokens)

    def test_batch_equals_single(self, rough_params):
        """Batched greedy decoding matches one-at-a-time decoding."""
        prompts = [list(gen_countdown(s).prompt_tokens) for s in range(4)]
        batch = generate_batch(rough_params, prompts, 0.0, 8)
        for prompt, rollout in zip(prompts, batch):
            assert generate(rough_params, prompt, 0.0, 8).generated == rollout.generated

    def test_long_generation_slides_window(self, tiny_params):
        """Generation past the window keeps decoding."""
        rollout = generate(tiny_params, list(range(10)), 0.0, 8)
        assert 1 <= len(rollout.generated) <= 8

    def test_recorded_dists(self, tiny_params):
        """record_dists keeps one distribution per step."""
        rollout = generate(tiny_params, [1, 2], 0.0, 3, record_dists=True)
        assert len(rollout.per_step_dists) == len(rollout.generated)
        steps = zip(rollout.per_step_dists, rollout.generated, rollout.logprobs)
        for dist, token, logprob in steps:
            assert math.log(dist[token]) == pytest.approx(logprob)


class TestLogprobGradient:
    """Exact sequence log-probability gradients."""

    def test_empty_output(self, tiny_params):
        """No output tokens: log-prob 0 and zero gradient."""
        logprob, grad = logprob_and_grad(tiny_params, [1, 2], [])
        assert logprob == 0.0
        assert grad.global_norm() == 0.0

    def test_uniform_single_token(self, tiny_arch):
        """Zero params: one token has log-prob -ln|V|."""
        logprob, _ = logprob_and_grad(zero_params(tiny_arch), [1], [4])
        assert logprob == pytest.approx(-math.log(V.size), abs=1e-12)

    def test_logprob_matches_generation(self, tiny_params):
        """Teacher-forced log-prob equals the sum recorded while decoding."""
        prompt = list(gen_countdown(4).prompt_tokens)
        rollout = generate(tiny_params, prompt, 0.0, 6)
        logprob, _ = logprob_and_grad(tiny_params, prompt, rollout.generated)
        assert logprob == pytest.approx(rollout.logprob, abs=1e-10)

    def test_gradient_matches_finite_differences(self, rough_params):
        """Analytic gradient vs central differences on every tensor."""
        prompt = list(gen_countdown(5).prompt_tokens)
        output = V.encode(["3", "+", "5", "*", "2"]) + [EOS]
        _, grad = logprob_and_grad(rough_params, prompt, output)

        def f(p):
            return logprob_and_grad(p, prompt, output)[0]

        _assert_grad_matches_fd(grad, f, rough_params, _coordinates(rough_params, 50, 1))

    def test_two_layer_gradient(self):
        """Finite-difference check through two hidden layers."""
        arch = PolicyArch(context_window=6, embed_dim=3, hidden_dim=5, layers=2)
        template = zero_params(arch)
        flat = 0.4 * np.random.default_rng(3).standard_normal(template.size)
        params = ParamSet.from_flat(template, flat, dtype=np.float64)
        prompt, output = [16, 17, 15], [17, 16, EOS]
        _, grad = logprob_and_grad(params, prompt, output)

        def f(p):
            return logprob_and_grad(p, prompt, output)[0]

        _assert_grad_matches_fd(grad, f, params, _coordinates(params, 50, 2))

    def test_weighted_gradient_is_linear(self, rough_params):
        """weights combine per-sequence gradients linearly."""
        seqs = [([1, 2], [3, EOS]), ([4], [5, 6])]
        _, g0 = logprob_and_grad(rough_params, *seqs[0])
        _, g1 = logprob_and_grad(rough_params, *seqs[1])
        totals, combined = weighted_logprob_grad(rough_params, seqs, [2.0, -0.5])
        expected = 2.0 * g0.flatten() - 0.5 * g1.flatten()
        np.testing.assert_allclose(combined.flatten(), expected, atol=1e-12)
        np.testing.assert_allclose(totals, sequence_logprobs(rough_params, seqs), atol=1e-12)

    def test_callable_weights(self, rough_params):
        """A weight function sees the per-sequence log-probs."""
        seqs = [([1], [2]), ([3], [4, 5])]
        seen = []

        def weights(logprobs):
            seen.append(logprobs.copy())
            return np.ones(len(logprobs))

        totals, grad = weighted_logprob_grad(rough_params, seqs, weights)
        _, explicit = weighted_logprob_grad(rough_params, seqs, [1.0, 1.0])
        np.testing.assert_array_equal(seen[0], totals)
        assert grad.bitwise_equal(explicit)

    def test_weight_count_checked(self, tiny_params):
        """One weight per sequence."""
        with pytest.raises(ConfigurationError):
            weighted_logprob_grad(tiny_params, [([1], [2])], [1.0, 2.0])

    def test_bad_output_token(self, tiny_params):
        """Output ids outside the vocabulary raise VocabError."""
        with pytest.raises(VocabError):
            logprob_and_grad(tiny_params, [1], [42])
