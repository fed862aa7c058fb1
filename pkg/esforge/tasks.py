"""
Task generators, rewards and accuracy evaluation.

countdown-mini: three digits in [1, 9] and a target; the answer is an
    expression `d op d op d <eos>` using each digit exactly once, evaluated
    strictly left to right with + - *. Reward = 0.1 * format + 0.9 * answer.
parity8: eight bit tokens; the answer is the XOR label as the first token.
"""

from __future__ import annotations

import logging
import operator
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from esforge.constants import (
    DEFAULT_EVAL_SIZE,
    DEFAULT_TRAIN_POOL_SIZE,
    TAG_EVAL_SET,
    TAG_TRAIN_POOL,
)
from esforge.errors import ConfigurationError
from esforge.models import TaskId
from esforge.noise import NoiseStream, mix_seed, stream_create
from esforge.params import ParamSet
from esforge.policy import DEFAULT_VOCAB, Vocab, generate_batch

logger = logging.getLogger(__name__)

OPERATORS: Dict[str, Callable[[int, int], int]] = {
    "+": operator.add,
    "-": operator.sub,
    "*": operator.mul,
}
OPERATOR_SYMBOLS: Tuple[str, ...] = ("+", "-", "*")
FORMAT_WEIGHT = 0.1
ANSWER_WEIGHT = 0.9


def _pick(stream: NoiseStream, n: int) -> int:
    """Uniform integer in [0, n) from one stream draw."""
    return min(int(stream.next_uniform() * n), n - 1)


def evaluate_left_to_right(numbers: Sequence[int], ops: Sequence[str]) -> int:
    """Evaluate n0 op0 n1 op1 n2 ... with no operator precedence."""
    value = numbers[0]
    for op, number in zip(ops, numbers[1:]):
        value = OPERATORS[op](value, number)
    return value


@dataclass(frozen=True)
class CountdownInstance:
    numbers: Tuple[int, int, int]
    target: int
    prompt_tokens: Tuple[int, ...]


@dataclass(frozen=True)
class ParityInstance:
    bits: Tuple[int, ...]
    label: int
    prompt_tokens: Tuple[int, ...]


Instance = Union[CountdownInstance, ParityInstance]


@dataclass(frozen=True)
class RewardBreakdown:
    """total = 0.1 * format_reward + 0.9 * answer_reward."""

    format_reward: int
    answer_reward: int
    total: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "total", FORMAT_WEIGHT * self.format_reward + ANSWER_WEIGHT * self.answer_reward
        )


def encode_int(value: int, vocab: Vocab = DEFAULT_VOCAB) -> List[int]:
    """Decimal tokens of an integer, with a leading '-' when negative."""
    tokens = [vocab.id("-")] if value < 0 else []
    return tokens + [vocab.id(d) for d in str(abs(value))]


def gen_countdown(seed: int, vocab: Vocab = DEFAULT_VOCAB) -> CountdownInstance:
    """
    Deterministic solvable instance: draw three numbers, a random order of
    them and two operators, then take the target from evaluating that
    expression.
    """
    stream = stream_create(seed)
    numbers = tuple(1 + _pick(stream, 9) for _ in range(3))
    order = list(numbers)
    for i in range(len(order) - 1, 0, -1):
        j = _pick(stream, i + 1)
        order[i], order[j] = order[j], order[i]
    ops = [OPERATOR_SYMBOLS[_pick(stream, 3)] for _ in range(2)]
    target = evaluate_left_to_right(order, ops)
    prompt = [vocab.id(str(n)) for n in numbers] + [vocab.sep] + encode_int(target, vocab)
    prompt.append(vocab.sep)
    return CountdownInstance(numbers=numbers, target=target, prompt_tokens=tuple(prompt))


def gen_parity(seed: int, vocab: Vocab = DEFAULT_VOCAB, n_bits: int = 8) -> ParityInstance:
    """`n_bits` uniformly random bits (eight for the task itself) and their XOR label."""
    if n_bits < 1:
        raise ConfigurationError(f"n_bits must be >= 1, got {n_bits}")
    stream = stream_create(seed)
    values = [int(u >= 0.5) for u in stream.uniforms(n_bits)]
    bits = tuple(vocab.id(f"b{v}") for v in values)
    label = vocab.id(f"b{sum(values) % 2}")
    return ParityInstance(bits=bits, label=label, prompt_tokens=bits + (vocab.sep,))


def gen_parity_suffix(seed: int, max_bits: int = 8, vocab: Vocab = DEFAULT_VOCAB) -> ParityInstance:
    """
    Parity over k bits with k uniform in 1..max_bits. Shorter prompts leave
    the earlier window slots as BOS padding, so the k-bit problem is the
    (k-1)-bit one plus one more bit.
    """
    stream = stream_create(mix_seed(seed, max_bits))
    return gen_parity(seed, vocab, 1 + _pick(stream, max_bits))


def parse_expression(
    output: Sequence[int], vocab: Vocab = DEFAULT_VOCAB
) -> Optional[Tuple[List[int], List[str]]]:
    """Split `d op d op d <eos>` into (digits, operators); None if malformed."""
    if len(output) != 6 or output[5] != vocab.eos:
        return None
    numbers, ops = [], []
    for position, token in enumerate(output[:5]):
        if not 0 <= token < vocab.size:
            return None
        symbol = vocab.tokens[token]
        if position % 2 == 0:
            if not symbol.isdigit():
                return None
            numbers.append(int(symbol))
        else:
            if symbol not in OPERATORS:
                return None
            ops.append(symbol)
    return numbers, ops


def reward_countdown(
    instance: CountdownInstance, output: Sequence[int], vocab: Vocab = DEFAULT_VOCAB
) -> RewardBreakdown:
    """Format and answer reward for a countdown output; never raises."""
    parsed = parse_expression([int(t) for t in output], vocab)
    if parsed is None:
        return RewardBreakdown(0, 0)
    numbers, ops = parsed
    if sorted(numbers) != sorted(instance.numbers):
        return RewardBreakdown(0, 0)
    correct = evaluate_left_to_right(numbers, ops) == instance.target
    return RewardBreakdown(1, int(correct))


def reward_parity(instance: ParityInstance, output: Sequence[int]) -> float:
    """1.0 iff the first output token is the label."""
    return 1.0 if len(output) > 0 and int(output[0]) == instance.label else 0.0


def format_demo(
    instance: CountdownInstance, seed: int, vocab: Vocab = DEFAULT_VOCAB
) -> List[int]:
    """
    A grammatical answer using the instance's numbers in random order with
    random operators. Correct only by chance.
    """
    stream = stream_create(seed)
    order = list(instance.numbers)
    for i in range(len(order) - 1, 0, -1):
        j = _pick(stream, i + 1)
        order[i], order[j] = order[j], order[i]
    ops = [OPERATOR_SYMBOLS[_pick(stream, 3)] for _ in range(2)]
    tokens = [vocab.id(str(order[0]))]
    for op, number in zip(ops, order[1:]):
        tokens += [vocab.id(op), vocab.id(str(number))]
    return tokens + [vocab.eos]


def render(tokens: Sequence[int], vocab: Vocab = DEFAULT_VOCAB) -> str:
    """Human-readable rendering for logs, e.g. '1+2*3<eos>'."""
    return "".join(vocab.decode([int(t) for t in tokens]))


@dataclass(frozen=True)
class TaskSpec:
    """Registry entry: generator, training reward and accuracy for one task."""

    task_id: TaskId
    code: int
    max_tokens: int
    generate: Callable[[int], Instance]
    reward: Callable[[Instance, Sequence[int]], float]
    accuracy: Callable[[Instance, Sequence[int]], float]


TASKS: Dict[TaskId, TaskSpec] = {
    TaskId.COUNTDOWN: TaskSpec(
        task_id=TaskId.COUNTDOWN,
        code=1,
        max_tokens=8,
        generate=gen_countdown,
        reward=lambda inst, out: reward_countdown(inst, out).total,
        accuracy=lambda inst, out: float(reward_countdown(inst, out).answer_reward),
    ),
    TaskId.PARITY: TaskSpec(
        task_id=TaskId.PARITY,
        code=2,
        max_tokens=2,
        generate=gen_parity,
        reward=reward_parity,
        accuracy=reward_parity,
    ),
}


def get_task(task: Union[str, TaskId]) -> TaskSpec:
    """
    Look up a task by id.

    Raises:
        ConfigurationError: If the id is unknown
    """
    try:
        return TASKS[TaskId(task)]
    except ValueError:
        known = ", ".join(t.value for t in TaskId)
        raise ConfigurationError(f"unknown task id {task!r} (known: {known})") from None


def training_pool(
    task: Union[str, TaskId], run_seed: int, size: int = DEFAULT_TRAIN_POOL_SIZE
) -> List[Instance]:
    """Fixed training instances for a run."""
    task_def = get_task(task)
    return [
        task_def.generate(mix_seed(TAG_TRAIN_POOL, task_def.code, run_seed, i)) for i in range(size)
    ]


def eval_set(
    task: Union[str, TaskId], eval_seed: int, n: int = DEFAULT_EVAL_SIZE
) -> List[Instance]:
    """Held-out instances; their seeds live in a namespace disjoint from training pools."""
    task_def = get_task(task)
    return [
        task_def.generate(mix_seed(TAG_EVAL_SET, task_def.code, eval_seed, i)) for i in range(n)
    ]


def task_of(instance: Instance) -> TaskId:
    """Task id an instance belongs to."""
    if isinstance(instance, CountdownInstance):
        return TaskId.COUNTDOWN
    if isinstance(instance, ParityInstance):
        return TaskId.PARITY
    raise ConfigurationError(f"not a task instance: {type(instance).__name__}")


def decode_cap(task: Union[str, TaskId], max_tokens: int) -> int:
    """
    Effective decode length: no output longer than the task's answer length
    can score, so rollouts are cut at the task cap.
    """
    return max(1, min(max_tokens, get_task(task).max_tokens))


def batch_rewards(
    params: ParamSet,
    task: Union[str, TaskId],
    instances: Sequence[Instance],
    max_tokens: Optional[int] = None,
    reward_fn: Optional[Callable[[Instance, Sequence[int]], float]] = None,
) -> np.ndarray:
    """Greedy-decode every instance and score it with the task's training reward."""
    task_def = get_task(task)
    cap = decode_cap(task, max_tokens if max_tokens is not None else task_def.max_tokens)
    score = reward_fn or task_def.reward
    rollouts = generate_batch(params, [inst.prompt_tokens for inst in instances], 0.0, cap)
    return np.array(
        [score(inst, r.generated) for inst, r in zip(instances, rollouts)], dtype=np.float64
    )


def accuracy_on(
    params: ParamSet, task: Union[str, TaskId], instances: Sequence[Instance]
) -> float:
    """Mean accuracy (answer reward) under greedy decoding on given instances."""
    task_def = get_task(task)
    if not instances:
        raise ConfigurationError("accuracy needs at least one instance")
    scores = batch_rewards(params, task, instances, task_def.max_tokens, task_def.accuracy)
    return float(np.mean(scores))


def evaluate(params: ParamSet, task: Union[str, TaskId], n: int, eval_seed: int) -> float:
    """
    Accuracy over `n` held-out instances with temperature-0 decoding.

    Raises:
        ConfigurationError: Unknown task id or n < 1
    """
    get_task(task)
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    return accuracy_on(params, task, eval_set(task, eval_seed, n))
