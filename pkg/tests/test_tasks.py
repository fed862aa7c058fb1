"""Tests for esforge.tasks."""

import itertools

import numpy as np
import pytest

from esforge.errors import ConfigurationError
from esforge.models import TaskId
from esforge.policy import DEFAULT_VOCAB
from esforge.tasks import (
    CountdownInstance,
    accuracy_on,
    decode_cap,
    eval_set,
    evaluate,
    evaluate_left_to_right,
    format_demo,
    gen_countdown,
    gen_parity,
    gen_parity_suffix,
    get_task,
    parse_expression,
    render,
    reward_countdown,
    reward_parity,
    task_of,
    training_pool,
)

V = DEFAULT_VOCAB


def _expr(text: str):
    return V.encode(list(text)) + [V.eos]


def _countdown(numbers, target) -> CountdownInstance:
    return CountdownInstance(numbers=tuple(numbers), target=target, prompt_tokens=())


class TestCountdownGenerator:
    """gen_countdown."""

    def test_deterministic(self):
        """Same seed, same instance."""
        assert gen_countdown(12) == gen_countdown(12)

    def test_numbers_in_range(self):
        """All numbers lie in [1, 9]."""
        for seed in range(1000):
            assert all(1 <= n <= 9 for n in gen_countdown(seed).numbers)

    def test_targets_reachable(self):
        """Every target over 10^4 seeds is hit by one of the 54 ordered expressions."""
        for seed in range(10_000):
            inst = gen_countdown(seed)
            values = {
                evaluate_left_to_right(order, ops)
                for order in itertools.permutations(inst.numbers)
                for ops in itertools.product("+-*", repeat=2)
            }
            assert inst.target in values

    def test_prompt_layout(self):
        """Prompt is numbers, SEP, target digits, SEP."""
        inst = gen_countdown(0)
        tokens = V.decode(inst.prompt_tokens)
        assert tokens[:3] == [str(n) for n in inst.numbers]
        assert tokens[3] == "<sep>"
        assert tokens[-1] == "<sep>"
        assert "".join(tokens[4:-1]) == str(inst.target)

    def test_left_to_right_evaluation(self):
        """No operator precedence."""
        assert evaluate_left_to_right([1, 2, 3], ["+", "*"]) == 9
        assert evaluate_left_to_right([2, 5, 9], ["-", "*"]) == -27


class TestCountdownReward:
    """reward_countdown weighting."""

    def test_correct_expression(self):
        """1+2+3 = 6: total 1.0."""
        r = reward_countdown(_countdown([1, 2, 3], 6), _expr("1+2+3"))
        assert (r.format_reward, r.answer_reward, r.total) == (1, 1, 1.0)

    def test_wrong_value(self):
        """1+2-3 = 0: format only, total 0.1."""
        r = reward_countdown(_countdown([1, 2, 3], 6), _expr("1+2-3"))
        assert (r.format_reward, r.answer_reward, r.total) == (1, 0, 0.1)

    def test_reused_number(self):
        """2+2+2 reuses a number: total 0.0."""
        r = reward_countdown(_countdown([1, 2, 3], 6), _expr("2+2+2"))
        assert (r.format_reward, r.answer_reward, r.total) == (0, 0, 0.0)

    @pytest.mark.parametrize(
        "output",
        [[], V.encode(list("1+2+3")), _expr("1+2")[:-1] + V.encode(["+", "3"]), _expr("1++23")],
    )
    def test_malformed_outputs(self, output):
        """Missing EOS, wrong length or bad tokens score zero."""
        assert reward_countdown(_countdown([1, 2, 3], 6), output).total == 0.0

    def test_fuzzed_rewards_take_three_values(self):
        """Random outputs, valid or not, only ever score 0, 0.1 or 1.0."""
        rng = np.random.default_rng(17)
        seen = set()
        for seed in range(2000):
            inst = gen_countdown(seed)
            if seed % 3 == 0:
                output = format_demo(inst, seed)
            else:
                output = rng.integers(0, V.size, size=int(rng.integers(0, 9))).tolist()
            total = reward_countdown(inst, output).total
            assert total in (0.0, 0.1, 1.0)
            seen.add(total)
        assert {0.0, 0.1} <= seen

    def test_out_of_vocabulary_output_scores_zero(self):
        """Token ids outside the vocabulary never raise."""
        assert reward_countdown(_countdown([1, 2, 3], 6), [99, -1, 3, 4, 5, V.eos]).total == 0.0

    def test_parse_expression(self):
        """Digits and operators are split out."""
        assert parse_expression(_expr("4*2-1")) == ([4, 2, 1], ["*", "-"])
        assert parse_expression(_expr("4*2-")) is None


class TestParity:
    """gen_parity and reward_parity."""

    def test_label_is_xor(self):
        """Label is b1 iff an odd number of bits is b1."""
        for seed in range(200):
            inst = gen_parity(seed)
            ones = sum(1 for b in inst.bits if b == V.id("b1"))
            assert inst.label == V.id(f"b{ones % 2}")
            assert inst.prompt_tokens == inst.bits + (V.sep,)

    def test_reward_first_token(self):
        """Only the first output token counts."""
        inst = gen_parity(1)
        other = V.id("b0") if inst.label == V.id("b1") else V.id("b1")
        assert reward_parity(inst, [inst.label, other]) == 1.0
        assert reward_parity(inst, [other, inst.label]) == 0.0

    def test_empty_output(self):
        """No tokens, no reward."""
        assert reward_parity(gen_parity(1), []) == 0.0


class TestAccuracy:
    """Evaluation sets and accuracy."""

    def test_oracle_policy_is_perfect(self, parity_oracle):
        """The hand-built parity policy scores 1.0."""
        assert evaluate(parity_oracle, TaskId.PARITY, 200, eval_seed=5) == 1.0

    def test_constant_policy_near_half(self, constant_b0_params):
        """Always answering b0 scores about one half."""
        acc = evaluate(constant_b0_params, "parity8", 2000, eval_seed=9)
        assert 0.45 <= acc <= 0.55

    def test_accuracy_bounds_and_determinism(self, tiny_params):
        """Accuracy is in [0, 1] and repeatable."""
        a = evaluate(tiny_params, "countdown-mini", 50, eval_seed=1)
        b = evaluate(tiny_params, "countdown-mini", 50, eval_seed=1)
        assert 0.0 <= a <= 1.0
        assert a == b

    @pytest.mark.parametrize("task", ["parity8", "countdown-mini"])
    def test_accuracy_ignores_instance_order(self, rough_params, task):
        """Shuffling the evaluation instances leaves accuracy unchanged."""
        instances = eval_set(task, 4, 64)
        shuffled = [instances[i] for i in np.random.default_rng(2).permutation(len(instances))]
        assert accuracy_on(rough_params, task, instances) == accuracy_on(
            rough_params, task, shuffled
        )

    def test_suffix_parity_lengths_and_labels(self):
        """Suffix instances cover every length 1..8 with XOR labels."""
        lengths = set()
        for seed in range(400):
            inst = gen_parity_suffix(seed)
            ones = sum(1 for b in inst.bits if b == V.id("b1"))
            assert inst.label == V.id(f"b{ones % 2}")
            lengths.add(len(inst.bits))
        assert lengths == set(range(1, 9))

    def test_full_length_parity_unchanged(self):
        """Eight is the default bit count."""
        assert gen_parity(5, n_bits=8) == gen_parity(5)

    def test_accuracy_needs_instances(self, tiny_params):
        """An empty instance list is rejected."""
        with pytest.raises(ConfigurationError):
            accuracy_on(tiny_params, "parity8", [])

    def test_n_must_be_positive(self, tiny_params):
        """evaluate rejects n < 1."""
        with pytest.raises(ConfigurationError):
            evaluate(tiny_params, "parity8", 0, eval_seed=1)

    def test_unknown_task(self, tiny_params):
        """Unknown ids raise ConfigurationError."""
        with pytest.raises(ConfigurationError):
            evaluate(tiny_params, "sudoku", 10, eval_seed=1)


class TestPoolsAndHelpers:
    """Training pools, eval sets and small helpers."""

    def test_pool_and_eval_seeds_differ(self):
        """Training and evaluation draw from different seed namespaces."""
        pool = training_pool("parity8", 1, 50)
        held_out = eval_set("parity8", 1, 50)
        assert pool != held_out
        assert training_pool("parity8", 1, 50) == pool

    def test_pool_size(self):
        """Pools default to 200 instances."""
        assert len(training_pool(TaskId.COUNTDOWN, 4)) == 200

    def test_task_of(self):
        """Instances know their task."""
        assert task_of(gen_parity(0)) == TaskId.PARITY
        assert task_of(gen_countdown(0)) == TaskId.COUNTDOWN
        with pytest.raises(ConfigurationError):
            task_of("not an instance")

    def test_decode_cap(self):
        """Decode length is capped by the task's answer length."""
        assert decode_cap("parity8", 16) == 2
        assert decode_cap("countdown-mini", 16) == 8
        assert decode_cap("countdown-mini", 4) == 4
        assert get_task("countdown-mini").code == 1

    def test_format_demo_is_grammatical(self):
        """Demonstrations parse and use the instance's numbers."""
        for seed in range(50):
            inst = gen_countdown(seed)
            demo = format_demo(inst, seed + 1000)
            assert reward_countdown(inst, demo).format_reward == 1

    def test_render(self):
        """Tokens render as a compact string."""
        assert render(_expr("1+2*3")) == "1+2*3<eos>"
