"""Prime-field and elliptic-curve arithmetic plus a reference single-party ECDSA.

Everything downstream (secret sharing, the joint signing protocol, the RPKI
object layer) computes in the scalar field of one fixed prime-order curve.
The default parameter set is NIST P-256; only the "prime-order group with
generator G" property is relied upon elsewhere.

Arithmetic is plain Python big-int math and is NOT constant time.  This is a
research artifact for protocol evaluation, not a hardened signer; see the
security caveat in the README.
"""

from __future__ import annotations

import hashlib
import secrets
import threading
from dataclasses import dataclass
from typing import Optional

# NIST P-256 domain parameters (SEC 2 v2, secp256r1).
FIELD_PRIME = 0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF
CURVE_A = FIELD_PRIME - 3
CURVE_B = 0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B
GEN_X = 0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296
GEN_Y = 0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5
# Order of the group generated by G; scalars live mod this value.
CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551

SCALAR_BYTES = 32
POINT_BYTES = 65  # 0x04 tag + x + y
IDENTITY_BYTES = b"\x00"


class AlgebraError(Exception):
    """Raised on invalid field/curve inputs (zero inverse, off-curve point...)."""


class OpCounter:
    """Per-thread tally of public curve operations (point adds, scalar mults).

    Used to assert that specific protocol windows perform no elliptic-curve
    work at all (the online signing step must be field-only).  Counts are
    thread-local: each protocol party runs on its own thread, so a party's
    window never picks up a concurrent peer's operations.
    """

    def __init__(self) -> None:
        self._local = threading.local()

    def _cell(self) -> dict:
        cell = getattr(self._local, "counts", None)
        if cell is None:
            cell = {"point_add": 0, "scalar_mul": 0}
            self._local.counts = cell
        return cell

    def bump_add(self) -> None:
        self._cell()["point_add"] += 1

    def bump_mul(self) -> None:
        self._cell()["scalar_mul"] += 1

    @property
    def point_adds(self) -> int:
        return self._cell()["point_add"]

    @property
    def scalar_muls(self) -> int:
        return self._cell()["scalar_mul"]

    def total(self) -> int:
        cell = self._cell()
        return cell["point_add"] + cell["scalar_mul"]

    def reset(self) -> None:
        self._local.counts = {"point_add": 0, "scalar_mul": 0}


OP_COUNTER = OpCounter()


class FieldElement:
    """An element of Z_p in canonical reduced form.

    `modulus` defaults to the curve order; tiny moduli are accepted so the
    sharing layer can be exercised over toy fields in tests.
    """

    __slots__ = ("value", "modulus")

    def __init__(self, value: int, modulus: int = CURVE_ORDER) -> None:
        self.value = value % modulus
        self.modulus = modulus

    def _check(self, other: "FieldElement") -> None:
        if self.modulus != other.modulus:
            raise AlgebraError("field mismatch")

    def __add__(self, other: "FieldElement") -> "FieldElement":
        self._check(other)
        return FieldElement(self.value + other.value, self.modulus)

    def __sub__(self, other: "FieldElement") -> "FieldElement":
        self._check(other)
        return FieldElement(self.value - other.value, self.modulus)

    def __mul__(self, other: "FieldElement") -> "FieldElement":
        self._check(other)
        return FieldElement(self.value * other.value, self.modulus)

    def __neg__(self) -> "FieldElement":
        return FieldElement(-self.value, self.modulus)

    def inv(self) -> "FieldElement":
        if self.value == 0:
            raise AlgebraError("non-invertible element")
        return FieldElement(pow(self.value, -1, self.modulus), self.modulus)

    def is_zero(self) -> bool:
        return self.value == 0

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, FieldElement)
            and self.value == other.value
            and self.modulus == other.modulus
        )

    def __hash__(self) -> int:
        return hash((self.value, self.modulus))

    def __repr__(self) -> str:
        return f"FieldElement(0x{self.value:x})"

    def to_bytes(self) -> bytes:
        if self.modulus != CURVE_ORDER:
            raise AlgebraError("fixed-width serialization is defined for the curve field only")
        return self.value.to_bytes(SCALAR_BYTES, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> "FieldElement":
        if len(data) != SCALAR_BYTES:
            raise AlgebraError(f"field element must be {SCALAR_BYTES} bytes, got {len(data)}")
        value = int.from_bytes(data, "big")
        if value >= CURVE_ORDER:
            raise AlgebraError("field element not in canonical reduced form")
        return cls(value)

    @classmethod
    def random(cls, rng=None, modulus: int = CURVE_ORDER) -> "FieldElement":
        """Uniform element; `rng` is a seeded random.Random for tests, else os RNG."""
        if rng is not None:
            return cls(rng.randrange(modulus), modulus)
        return cls(secrets.randbelow(modulus), modulus)

    @classmethod
    def random_nonzero(cls, rng=None, modulus: int = CURVE_ORDER) -> "FieldElement":
        while True:
            x = cls.random(rng, modulus)
            if not x.is_zero():
                return x

    @classmethod
    def zero(cls, modulus: int = CURVE_ORDER) -> "FieldElement":
        return cls(0, modulus)

    @classmethod
    def one(cls, modulus: int = CURVE_ORDER) -> "FieldElement":
        return cls(1, modulus)


def field_add(a: FieldElement, b: FieldElement) -> FieldElement:
    return a + b


def field_mul(a: FieldElement, b: FieldElement) -> FieldElement:
    return a * b


def field_inv(a: FieldElement) -> FieldElement:
    return a.inv()


# --- Curve arithmetic ------------------------------------------------------
#
# Internals run on Jacobian-coordinate int tuples; (0, 1, 0) is the identity.
# Only the public GroupPoint API touches the operation counter.


def _jac_add(p, q):
    if p[2] == 0:
        return q
    if q[2] == 0:
        return p
    m = FIELD_PRIME
    z1z1 = p[2] * p[2] % m
    z2z2 = q[2] * q[2] % m
    u1 = p[0] * z2z2 % m
    u2 = q[0] * z1z1 % m
    s1 = p[1] * z2z2 % m * q[2] % m
    s2 = q[1] * z1z1 % m * p[2] % m
    if u1 == u2:
        if s1 != s2:
            return (0, 1, 0)
        return _jac_double(p)
    h = (u2 - u1) % m
    hh = h * h % m
    hhh = h * hh % m
    r = (s2 - s1) % m
    v = u1 * hh % m
    x3 = (r * r - hhh - 2 * v) % m
    y3 = (r * (v - x3) - s1 * hhh) % m
    z3 = h * p[2] % m * q[2] % m
    return (x3, y3, z3)


def _jac_double(p):
    if p[2] == 0 or p[1] == 0:
        return (0, 1, 0)
    m = FIELD_PRIME
    xx = p[0] * p[0] % m
    yy = p[1] * p[1] % m
    yyyy = yy * yy % m
    zz = p[2] * p[2] % m
    s = 2 * ((p[0] + yy) * (p[0] + yy) - xx - yyyy) % m
    w = (3 * xx + CURVE_A * zz % m * zz) % m
    x3 = (w * w - 2 * s) % m
    y3 = (w * (s - x3) - 8 * yyyy) % m
    z3 = ((p[1] + p[2]) * (p[1] + p[2]) - yy - zz) % m
    return (x3, y3, z3)


def _jac_mul(k: int, p):
    r = (0, 1, 0)
    while k > 0:
        if k & 1:
            r = _jac_add(r, p)
        p = _jac_double(p)
        k >>= 1
    return r


def _to_affine(p) -> "GroupPoint":
    if p[2] == 0:
        return GroupPoint.identity()
    zinv = pow(p[2], -1, FIELD_PRIME)
    zinv2 = zinv * zinv % FIELD_PRIME
    x = p[0] * zinv2 % FIELD_PRIME
    y = p[1] * zinv2 % FIELD_PRIME * zinv % FIELD_PRIME
    return GroupPoint(x, y)


class GroupPoint:
    """A point on the curve (affine) or the group identity.

    Immutable; supports + for point addition and scalar * point.
    """

    __slots__ = ("x", "y")

    def __init__(self, x: Optional[int], y: Optional[int]) -> None:
        self.x = x
        self.y = y
        if x is not None:
            if not (0 <= x < FIELD_PRIME and 0 <= y < FIELD_PRIME):
                raise AlgebraError("coordinate out of range")
            if (y * y - (x * x * x + CURVE_A * x + CURVE_B)) % FIELD_PRIME != 0:
                raise AlgebraError("point not on curve")

    @classmethod
    def identity(cls) -> "GroupPoint":
        pt = cls.__new__(cls)
        pt.x = None
        pt.y = None
        return pt

    def is_identity(self) -> bool:
        return self.x is None

    def __add__(self, other: "GroupPoint") -> "GroupPoint":
        OP_COUNTER.bump_add()
        return _to_affine(_jac_add(self._jac(), other._jac()))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, GroupPoint) and self.x == other.x and self.y == other.y

    def __hash__(self) -> int:
        return hash((self.x, self.y))

    def __repr__(self) -> str:
        if self.is_identity():
            return "GroupPoint(identity)"
        return f"GroupPoint(x=0x{self.x:x})"

    def _jac(self):
        if self.x is None:
            return (0, 1, 0)
        return (self.x, self.y, 1)

    def to_bytes(self) -> bytes:
        if self.is_identity():
            return IDENTITY_BYTES
        return b"\x04" + self.x.to_bytes(32, "big") + self.y.to_bytes(32, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> "GroupPoint":
        if data == IDENTITY_BYTES:
            return cls.identity()
        if len(data) != POINT_BYTES or data[0] != 0x04:
            raise AlgebraError("malformed point encoding")
        x = int.from_bytes(data[1:33], "big")
        y = int.from_bytes(data[33:65], "big")
        return cls(x, y)  # constructor re-checks the curve equation


GENERATOR = GroupPoint(GEN_X, GEN_Y)

# Fixed-base acceleration: 2^i * G for i in 0..255, built on first use.
_GEN_LADDER: list = []
_GEN_LADDER_LOCK = threading.Lock()


def _gen_ladder():
    global _GEN_LADDER
    if not _GEN_LADDER:
        with _GEN_LADDER_LOCK:
            if not _GEN_LADDER:
                ladder = [(GEN_X, GEN_Y, 1)]
                for _ in range(255):
                    ladder.append(_jac_double(ladder[-1]))
                _GEN_LADDER = ladder
    return _GEN_LADDER


def scalar_mul(k: FieldElement, point: GroupPoint) -> GroupPoint:
    """k * P.  scalar_mul(0, P) is the identity."""
    OP_COUNTER.bump_mul()
    kv = k.value % CURVE_ORDER
    if kv == 0 or point.is_identity():
        return GroupPoint.identity()
    if point.x == GEN_X and point.y == GEN_Y:
        ladder = _gen_ladder()
        acc = (0, 1, 0)
        i = 0
        while kv:
            if kv & 1:
                acc = _jac_add(acc, ladder[i])
            kv >>= 1
            i += 1
        return _to_affine(acc)
    return _to_affine(_jac_mul(kv, point._jac()))


def point_add(p: GroupPoint, q: GroupPoint) -> GroupPoint:
    return p + q


def hash_to_scalar(message: bytes) -> FieldElement:
    """SHA-256 of the message, interpreted big-endian and reduced mod the order."""
    digest = hashlib.sha256(message).digest()
    return FieldElement(int.from_bytes(digest, "big"))


@dataclass(frozen=True)
class Signature:
    r_x: FieldElement
    s: FieldElement

    def __post_init__(self) -> None:
        if self.r_x.is_zero() or self.s.is_zero():
            raise AlgebraError("degenerate signature component")

    def to_bytes(self) -> bytes:
        return self.r_x.to_bytes() + self.s.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Signature":
        if len(data) != 2 * SCALAR_BYTES:
            raise AlgebraError("signature must be 64 bytes")
        return cls(FieldElement.from_bytes(data[:32]), FieldElement.from_bytes(data[32:]))


@dataclass(frozen=True)
class KeyPair:
    sk: FieldElement
    pk: GroupPoint

    @classmethod
    def generate(cls, rng=None) -> "KeyPair":
        sk = FieldElement.random_nonzero(rng)
        return cls(sk, scalar_mul(sk, GENERATOR))


def ecdsa_sign(sk: FieldElement, message: bytes, k: Optional[FieldElement] = None,
               rng=None) -> Signature:
    """Plain single-party ECDSA; the oracle the joint protocol is checked against.

    Passing `k` explicitly is the deterministic test entry point and errors out
    on a degenerate instance key; without `k` a fresh nonce is sampled (and
    resampled on the ~2/p degenerate cases).
    """
    h = hash_to_scalar(message)
    explicit = k is not None
    while True:
        if not explicit:
            k = FieldElement.random_nonzero(rng)
        if k.is_zero():
            raise AlgebraError("degenerate instance key")
        r_point = scalar_mul(k, GENERATOR)
        r_x = FieldElement(r_point.x)  # reduce the x coordinate into the scalar field
        if r_x.is_zero():
            if explicit:
                raise AlgebraError("degenerate instance key")
            continue
        s = k.inv() * (h + sk * r_x)
        if s.is_zero():
            if explicit:
                raise AlgebraError("degenerate instance key")
            continue
        return Signature(r_x, s)


def ecdsa_verify(pk: GroupPoint, message: bytes, sig: Signature) -> bool:
    if pk.is_identity():
        raise AlgebraError("identity public key")
    if sig.r_x.is_zero() or sig.s.is_zero():
        return False
    h = hash_to_scalar(message)
    s_inv = sig.s.inv()
    candidate = scalar_mul(s_inv * h, GENERATOR) + scalar_mul(s_inv * sig.r_x, pk)
    if candidate.is_identity():
        return False
    return FieldElement(candidate.x) == sig.r_x
