"""
Synthetic task streams

Four task kinds over a small integer vocabulary. Every task in a family shares
the prompt layout and output format and differs only in instance parameters
(multiplier/offset, shift, cue tokens, marker), so families induce distinct
output-distribution geometry.

Token layout (vocab_size >= 64):
    0 BOS | 1 reserved | 2-9 task markers | 10-25 input symbols
    26-41 output symbols | 42-63 filler
"""

import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

BOS = 0
MARKER_BASE, NUM_MARKERS = 2, 8
INPUT_BASE, NUM_INPUTS = 10, 16
OUTPUT_BASE, NUM_OUTPUTS = 26, 16
FILLER_BASE, NUM_FILLERS = 42, 22
MIN_VOCAB = FILLER_BASE + NUM_FILLERS
PROMPT_LEN = 5

KINDS = ("modular-map", "copy", "reverse", "marker-classification")


@dataclass(frozen=True)
class TaskFamily:
    family_id: str
    kind: str
    params: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown task kind {self.kind!r}; expected one of {KINDS}")


@dataclass
class Split:
    prompts: np.ndarray  # (N, P) int64
    labels: np.ndarray  # (N, L) int64

    def __len__(self) -> int:
        return int(self.prompts.shape[0])

    def take(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split(self.prompts[idx], self.labels[idx])


@dataclass
class TaskInstance:
    task_id: str
    family_id: str
    kind: str
    params: Dict[str, int]
    train: Split
    probe: Split
    heldout: Split
    data_seed: int

    @property
    def prompt_len(self) -> int:
        return int(self.train.prompts.shape[1])

    @property
    def label_len(self) -> int:
        return int(self.train.labels.shape[1])


@dataclass
class TaskBatch:
    """Teacher-forced batch: tokens = prompt + label[:-1], targets = label"""
    tokens: np.ndarray
    targets: np.ndarray
    prompt_len: int

    @classmethod
    def from_split(cls, split: Split) -> "TaskBatch":
        if len(split) == 0 or split.labels.shape[1] == 0:
            raise ValueError("batch has no label positions")
        tokens = np.concatenate([split.prompts, split.labels[:, :-1]], axis=1)
        return cls(tokens, split.labels.copy(), int(split.prompts.shape[1]))

    @property
    def label_positions(self) -> np.ndarray:
        start = self.prompt_len - 1
        return np.arange(start, start + self.targets.shape[1])

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


# ----------------------------------------------------------------------------
# Seeding helpers
# ----------------------------------------------------------------------------

def _rng(*parts: Union[int, str]) -> np.random.Generator:
    words = [zlib.crc32(p.encode("utf-8")) if isinstance(p, str) else int(p) for p in parts]
    return np.random.default_rng(words)


# ----------------------------------------------------------------------------
# Family generators: (rng, instance params) -> (prompt, label)
#
# Every prompt is [BOS, marker, filler, filler, symbol] and every answer is a
# single token. Interventions only edit prompt positions, so the answer is
# read off the final prompt symbol.
# ----------------------------------------------------------------------------

def _fillers(rng: np.random.Generator, n: int) -> List[int]:
    return [FILLER_BASE + int(v) for v in rng.integers(0, NUM_FILLERS, size=n)]


def _prompt(rng, p, symbol: int) -> List[int]:
    return [BOS, p["marker"], *_fillers(rng, 2), symbol]


def _modular_map(rng, p):
    x = int(rng.integers(0, NUM_INPUTS))
    y = (p["a"] * x + p["c"]) % p["modulus"]
    return _prompt(rng, p, INPUT_BASE + x), [OUTPUT_BASE + y]


def _copy(rng, p):
    s = int(rng.integers(0, p["alphabet"]))
    return _prompt(rng, p, INPUT_BASE + s), [OUTPUT_BASE + (s + p["shift"]) % NUM_OUTPUTS]


def _reverse(rng, p):
    # the symbol is echoed through the alphabet read backwards
    s = int(rng.integers(0, p["alphabet"]))
    mirrored = p["alphabet"] - 1 - s
    return _prompt(rng, p, INPUT_BASE + s), [OUTPUT_BASE + (mirrored + p["shift"]) % NUM_OUTPUTS]


def _marker_classification(rng, p):
    cls = int(rng.integers(0, p["num_classes"]))
    return _prompt(rng, p, p[f"cue{cls}"]), [OUTPUT_BASE + p[f"out{cls}"]]


GENERATORS = {
    "modular-map": _modular_map,
    "copy": _copy,
    "reverse": _reverse,
    "marker-classification": _marker_classification,
}


def instance_params(family: TaskFamily, rng: np.random.Generator, marker: int) -> Dict[str, int]:
    """Draw the per-task parameters that distinguish tasks inside a family"""
    p = {"marker": MARKER_BASE + marker % NUM_MARKERS}
    if family.kind == "modular-map":
        modulus = family.params.get("modulus", 8)
        units = [a for a in range(1, modulus) if np.gcd(a, modulus) == 1]
        p.update(modulus=modulus, a=int(rng.choice(units)), c=int(rng.integers(0, modulus)))
    elif family.kind in ("copy", "reverse"):
        p.update(alphabet=family.params.get("alphabet", 8), shift=int(rng.integers(0, NUM_OUTPUTS)))
    else:
        k = family.params.get("num_classes", 4)
        cues = rng.choice(NUM_INPUTS, size=k, replace=False)
        outs = rng.choice(NUM_OUTPUTS, size=k, replace=False)
        p["num_classes"] = k
        for i in range(k):
            p[f"cue{i}"] = INPUT_BASE + int(cues[i])
            p[f"out{i}"] = int(outs[i])
    return p


def generate_task(task_id: str, family: TaskFamily, params: Dict[str, int], data_seed: int,
                  sizes: Tuple[int, int, int] = (128, 16, 24)) -> TaskInstance:
    """Sample disjoint train/probe/heldout splits; a pure function of its arguments"""
    rng = _rng(data_seed, task_id)
    generator = GENERATORS[family.kind]
    wanted = sum(sizes)
    seen = set()
    prompts, labels = [], []
    attempts = 0
    while len(prompts) < wanted:
        attempts += 1
        if attempts > 200 * wanted:
            raise ValueError(f"task {task_id}: cannot draw {wanted} distinct prompts")
        prompt, label = generator(rng, params)
        key = tuple(prompt)
        if key in seen:
            continue
        seen.add(key)
        prompts.append(prompt)
        labels.append(label)

    prompts = np.asarray(prompts, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    n_train, n_probe, _ = sizes
    cuts = [n_train, n_train + n_probe]
    splits = [Split(p, l) for p, l in zip(np.split(prompts, cuts), np.split(labels, cuts))]
    return TaskInstance(task_id, family.family_id, family.kind, dict(params),
                        splits[0], splits[1], splits[2], data_seed)


def generate_stream(spec: Sequence[Tuple[TaskFamily, int]], stream_seed: int, data_seed: int = 17,
                    sizes: Tuple[int, int, int] = (128, 16, 24)) -> List[TaskInstance]:
    """
    Deterministic stream; families are interleaved round-robin so that tasks
    of one family are not adjacent.
    """
    for family, count in spec:
        if count < 1:
            raise ValueError(f"family {family.family_id} needs count >= 1, got {count}")

    tasks: List[TaskInstance] = []
    drawn: Dict[int, set] = {}
    for i in range(max(count for _, count in spec)):
        for f_index, (family, count) in enumerate(spec):
            if i >= count:
                continue
            rng = _rng(stream_seed, f_index, i)
            # tasks of one family never share a labelling function
            seen = drawn.setdefault(f_index, set())
            for _ in range(100):
                params = instance_params(family, rng, marker=len(tasks))
                key = tuple(sorted((k, v) for k, v in params.items() if k != "marker"))
                if key not in seen:
                    break
            else:
                raise ValueError(f"family {family.family_id}: cannot draw {count} distinct instances")
            seen.add(key)
            task_id = f"t{len(tasks) + 1:02d}-{family.kind}"
            tasks.append(generate_task(task_id, family, params, data_seed, sizes))

    logger.info(f"Generated stream of {len(tasks)} tasks over {len(spec)} families")
    return tasks


def stream_from_config(stream_config, data_seed: int) -> List[TaskInstance]:
    """Build the stream a StreamConfig describes, permuted when order_seed is set"""
    spec = [
        (TaskFamily(f"{f.kind}-{i}", f.kind, dict(f.params)), f.count)
        for i, f in enumerate(stream_config.families)
    ]
    sizes = (stream_config.train_size, stream_config.probe_size, stream_config.heldout_size)
    tasks = generate_stream(spec, stream_config.stream_seed, data_seed, sizes)
    if stream_config.order_seed is not None:
        tasks = permute_stream(tasks, stream_config.order_seed)
    return tasks


def permute_stream(tasks: Sequence[TaskInstance], seed: int) -> List[TaskInstance]:
    """Task-order robustness: the same tasks in a seeded order"""
    order = _rng(seed, "order").permutation(len(tasks))
    return [tasks[i] for i in order]


def split_halves(task: TaskInstance) -> Tuple[TaskInstance, TaskInstance]:
    """Two disjoint random halves of one task; they share the held-out split"""
    if len(task.train) < 2:
        raise ValueError(f"task {task.task_id} has fewer than 2 training examples")
    rng = _rng(task.data_seed, task.task_id, "halves")

    def halve(split: Split) -> Tuple[Split, Split]:
        if len(split) < 2:
            return split, split
        order = rng.permutation(len(split))
        mid = len(split) // 2
        return split.take(np.sort(order[:mid])), split.take(np.sort(order[mid:]))

    train_a, train_b = halve(task.train)
    probe_a, probe_b = halve(task.probe)
    first = replace(task, task_id=f"{task.task_id}-a", train=train_a, probe=probe_a)
    second = replace(task, task_id=f"{task.task_id}-b", train=train_b, probe=probe_b)
    return first, second


# ----------------------------------------------------------------------------
# Line-delimited persistence
# ----------------------------------------------------------------------------

def write_tasks_jsonl(tasks: Iterable[TaskInstance], path: str):
    with open(path, "w", encoding="utf-8") as f:
        for task in tasks:
            for split_name in ("train", "probe", "heldout"):
                split = getattr(task, split_name)
                for prompt, label in zip(split.prompts, split.labels):
                    record = {
                        "task_id": task.task_id, "family_id": task.family_id, "kind": task.kind,
                        "params": task.params, "data_seed": task.data_seed, "split": split_name,
                        "prompt": prompt.tolist(), "label": label.tolist(),
                    }
                    f.write(json.dumps(record, sort_keys=True) + "\n")


def read_tasks_jsonl(path: str) -> List[TaskInstance]:
    rows: Dict[str, Dict] = {}
    order: List[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            record = json.loads(line)
            entry = rows.get(record["task_id"])
            if entry is None:
                entry = {"meta": record, "train": [], "probe": [], "heldout": []}
                rows[record["task_id"]] = entry
                order.append(record["task_id"])
            entry[record["split"]].append((record["prompt"], record["label"]))

    tasks = []
    for task_id in order:
        entry, meta = rows[task_id], rows[task_id]["meta"]
        splits = {}
        for name in ("train", "probe", "heldout"):
            pairs = entry[name]
            splits[name] = Split(np.asarray([p for p, _ in pairs], dtype=np.int64),
                                 np.asarray([l for _, l in pairs], dtype=np.int64))
        tasks.append(TaskInstance(task_id, meta["family_id"], meta["kind"], meta["params"],
                                  splits["train"], splits["probe"], splits["heldout"],
                                  meta["data_seed"]))
    return tasks


def check_vocab(vocab_size: int):
    if vocab_size < MIN_VOCAB:
        raise ValueError(f"synthetic tasks need vocab_size >= {MIN_VOCAB}, got {vocab_size}")


def epoch_batches(split: Split, batch_size: int, rng: np.random.Generator) -> List[TaskBatch]:
    """One shuffled pass over a split in teacher-forced batches"""
    if len(split) == 0:
        raise ValueError("empty split")
    order = rng.permutation(len(split))
    return [
        TaskBatch.from_split(split.take(np.sort(order[i:i + batch_size])))
        for i in range(0, len(split), batch_size)
    ]
