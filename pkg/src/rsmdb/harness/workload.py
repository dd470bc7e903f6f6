"""YCSB-like workload generation: initial rows and operation streams."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterator, Optional

from ..procedures import USERTABLE
from ..store import Row, TableSchema

DEFAULT_MIX = {"read": 0.5, "update": 0.3, "scan": 0.05, "rmw": 0.15}


def ycsb_key(i: int) -> bytes:
    return b"user%08d" % i


class ZipfianGenerator:
    """Integers in [0, n) with P(i) proportional to 1/(i+1)^theta.

    This is the closed-form sampler used by YCSB (after Gray et al.,
    "Quickly generating billion-record synthetic databases").
    """

    def __init__(self, n: int, theta: float = 0.99, rng: Optional[random.Random] = None) -> None:
        if n < 1:
            raise ValueError("need at least one item")
        if not 0 < theta < 1:
            raise ValueError("theta must be in (0, 1)")
        self.n = n
        self.theta = theta
        self.rng = rng or random.Random()
        self.zetan = sum(1.0 / (i**theta) for i in range(1, n + 1))
        zeta2 = 1.0 + 1.0 / (2**theta)
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - zeta2 / self.zetan)
        self._half = 1.0 + 0.5**theta

    def next(self) -> int:
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < self._half:
            return 1 if self.n > 1 else 0
        return min(self.n - 1, int(self.n * math.pow(self.eta * u - self.eta + 1, self.alpha)))


class UniformGenerator:
    def __init__(self, n: int, rng: Optional[random.Random] = None) -> None:
        self.n = n
        self.rng = rng or random.Random()

    def next(self) -> int:
        return self.rng.randrange(self.n)


@dataclass
class WorkloadSpec:
    rows: int = 10_000
    transactions: int = 10_000
    distribution: str = "zipfian"  # zipfian | uniform
    theta: float = 0.99
    mix: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    field_count: int = 4
    field_length: int = 16
    scan_max: int = 10
    seed: int = 1

    def schema(self) -> TableSchema:
        return TableSchema(USERTABLE, tuple(f"field{i}" for i in range(self.field_count)))


def initial_rows(spec: WorkloadSpec) -> list[Row]:
    rng = random.Random(spec.seed * 7919 + 1)
    schema = spec.schema()
    return [
        schema.row(ycsb_key(i), {f: rng.randbytes(spec.field_length) for f in schema.fields})
        for i in range(spec.rows)
    ]


def key_chooser(spec: WorkloadSpec, rng: random.Random):
    if spec.distribution == "zipfian":
        return ZipfianGenerator(spec.rows, spec.theta, rng)
    if spec.distribution == "uniform":
        return UniformGenerator(spec.rows, rng)
    raise ValueError(f"unknown key distribution {spec.distribution!r}")


def operations(spec: WorkloadSpec) -> Iterator[tuple[str, tuple[bytes, ...]]]:
    """``(procedure, args)`` pairs in the configured proportions."""
    rng = random.Random(spec.seed)
    keys = key_chooser(spec, rng)
    names = sorted(spec.mix)
    weights = [spec.mix[n] for n in names]
    fields = spec.schema().fields
    for _ in range(spec.transactions):
        op = rng.choices(names, weights)[0]
        key = ycsb_key(keys.next())
        if op == "read":
            yield "read", (key,)
        elif op == "update":
            yield "update", (key, rng.choice(fields).encode(), rng.randbytes(spec.field_length))
        elif op == "rmw":
            yield "rmw", (key, rng.choice(fields).encode(), rng.randbytes(spec.field_length))
        elif op == "scan":
            yield "scan", (key, str(rng.randint(1, spec.scan_max)).encode())
        elif op == "insert":
            yield "insert", (b"new%08d" % rng.randrange(10**8), *(rng.randbytes(spec.field_length) for _ in fields))
        elif op == "delete":
            yield "delete", (key,)
        else:
            raise ValueError(f"unknown operation {op!r}")
