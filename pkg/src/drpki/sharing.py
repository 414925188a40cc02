"""Secret sharing: additive and Shamir schemes, SPDZ-style MAC shares, Open.

Four scheme variants cover the 2x2 design space of adversary power and
corruption threshold:

  =============  ===================  ==================================
  scheme         parties to open      honesty check on Open
  =============  ===================  ==================================
  ADDITIVE       all n                none (honest-but-curious)
  ADDITIVE_MAC   all n                deferred batched MAC check
  SHAMIR         any t+1              none (honest-but-curious)
  SHAMIR_CHECKED any t+1              polynomial consistency, abort
  =============  ===================  ==================================

Shamir evaluation points are fixed as the party indices 1..n, so Lagrange
coefficients are deterministic and transcripts reproducible.  Constant
addition under additive sharing is assigned to party 1 by convention; Shamir
adds constants at every party.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from .algebra import (
    CURVE_ORDER,
    FieldElement,
    GroupPoint,
    scalar_mul,
)


class SharingError(Exception):
    """Parameter or usage error in the sharing layer."""


class ProtocolAbort(Exception):
    """Security-with-abort signal: a check failed or a party is unavailable.

    The protocol terminates without output; it never emits a wrong result.
    """


class SchemeId(Enum):
    ADDITIVE = 0          # semi-honest additive: honest-but-curious, dishonest majority
    ADDITIVE_MAC = 1      # MASCOT-style: malicious, dishonest majority
    SHAMIR = 2            # honest-but-curious, honest majority
    SHAMIR_CHECKED = 3    # malicious Shamir: checked opens, honest majority

    @property
    def is_shamir(self) -> bool:
        return self in (SchemeId.SHAMIR, SchemeId.SHAMIR_CHECKED)

    @property
    def has_mac(self) -> bool:
        return self is SchemeId.ADDITIVE_MAC

    @property
    def requires_all_parties(self) -> bool:
        return not self.is_shamir

    @property
    def is_checked(self) -> bool:
        return self in (SchemeId.ADDITIVE_MAC, SchemeId.SHAMIR_CHECKED)


@dataclass(frozen=True)
class MacKeyShare:
    """One party's additive share alpha_i of the global MAC key alpha.

    alpha is fixed per key-material epoch and never reconstructed in normal
    operation.
    """

    owner: int
    alpha_i: FieldElement


@dataclass(frozen=True)
class Share:
    """One party's piece of a shared field element.

    mac is present iff scheme is ADDITIVE_MAC; eval_point is present iff the
    scheme is a Shamir variant and always equals the owner's party index.
    """

    scheme: SchemeId
    owner: int
    value: FieldElement
    mac: Optional[FieldElement] = None
    eval_point: Optional[FieldElement] = None

    def __post_init__(self) -> None:
        if self.scheme.has_mac and self.mac is None:
            raise SharingError("MAC scheme share without MAC")
        if self.scheme.is_shamir and self.eval_point is None:
            raise SharingError("Shamir share without evaluation point")

    def to_bytes(self) -> bytes:
        out = bytes([self.scheme.value, self.owner]) + self.value.to_bytes()
        if self.mac is not None:
            out += self.mac.to_bytes()
        return out

    @classmethod
    def from_bytes(cls, data: bytes) -> "Share":
        if len(data) < 34:
            raise SharingError("share encoding too short")
        scheme = SchemeId(data[0])
        owner = data[1]
        value = FieldElement.from_bytes(data[2:34])
        mac = None
        if scheme.has_mac:
            if len(data) != 66:
                raise SharingError("MAC share encoding must be 66 bytes")
            mac = FieldElement.from_bytes(data[34:66])
        elif len(data) != 34:
            raise SharingError("share encoding has trailing bytes")
        eval_point = FieldElement(owner, value.modulus) if scheme.is_shamir else None
        return cls(scheme, owner, value, mac, eval_point)


@dataclass(frozen=True)
class PointShare:
    """A party's share of a curve point, combined under the scheme's rule."""

    scheme: SchemeId
    owner: int
    value: GroupPoint


def generate_mac_keys(n: int, rng=None, modulus: int = CURVE_ORDER) -> list[MacKeyShare]:
    return [MacKeyShare(i, FieldElement.random(rng, modulus)) for i in range(1, n + 1)]


def _poly_eval(coeffs: Sequence[FieldElement], x: FieldElement) -> FieldElement:
    acc = FieldElement.zero(x.modulus)
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def _additive_split(secret: FieldElement, n: int, rng) -> list[FieldElement]:
    parts = [FieldElement.random(rng, secret.modulus) for _ in range(n - 1)]
    last = secret
    for p in parts:
        last = last - p
    parts.append(last)
    return parts


def deal(
    scheme: SchemeId,
    secret: FieldElement,
    n: int,
    t: int = 0,
    rng=None,
    mac_keys: Optional[Sequence[MacKeyShare]] = None,
    owners: Optional[Sequence[int]] = None,
) -> list[Share]:
    """Dealer-style sharing of a known secret (test and setup plumbing).

    `owners` names the receiving party indices (default 1..n); Shamir
    evaluation points are those indices, so a sharing over a party subset
    reconstructs with the generic Lagrange rule.  Distributed generation of
    secrets nobody knows lives in the key generation protocol, not here.
    """
    owners = list(owners) if owners is not None else list(range(1, n + 1))
    if len(owners) != n or len(set(owners)) != n:
        raise SharingError("owners must be n distinct party indices")
    if n < 2:
        raise SharingError("need at least 2 parties")
    if scheme.is_shamir and not (0 < t < n):
        raise SharingError(f"Shamir threshold must satisfy 0 < t < n, got t={t} n={n}")
    if scheme.has_mac:
        if mac_keys is None or len(mac_keys) != n:
            raise SharingError("ADDITIVE_MAC dealing requires one MAC key share per party")
        if any(mk.owner != owner for mk, owner in zip(mac_keys, owners)):
            raise SharingError("MAC key shares misaligned with owners")
        alpha = FieldElement.zero(secret.modulus)
        for mk in mac_keys:
            alpha = alpha + mk.alpha_i

    if scheme.is_shamir:
        coeffs = [secret] + [FieldElement.random(rng, secret.modulus) for _ in range(t)]
        return [
            Share(scheme, i, _poly_eval(coeffs, FieldElement(i, secret.modulus)),
                  eval_point=FieldElement(i, secret.modulus))
            for i in owners
        ]

    values = _additive_split(secret, n, rng)
    if scheme.has_mac:
        macs = _additive_split(alpha * secret, n, rng)
        return [Share(scheme, owner, values[i], mac=macs[i]) for i, owner in enumerate(owners)]
    return [Share(scheme, owner, values[i]) for i, owner in enumerate(owners)]


def share_add(x: Share, y: Share) -> Share:
    if x.scheme is not y.scheme or x.owner != y.owner:
        raise SharingError("scheme mismatch")
    mac = x.mac + y.mac if x.mac is not None else None
    return Share(x.scheme, x.owner, x.value + y.value, mac, x.eval_point)


def share_scale_add(
    x: Share,
    public_c: FieldElement,
    public_d: FieldElement,
    mac_key: Optional[MacKeyShare] = None,
) -> Share:
    """Share of c*x + d for public constants c, d.

    Additive schemes assign d to party 1 only; every party's MAC share shifts
    by alpha_i * d.  Shamir schemes add d into every share (a constant
    polynomial).
    """
    value = public_c * x.value
    mac = None
    if x.scheme.is_shamir:
        value = value + public_d
    elif x.owner == 1:
        value = value + public_d
    if x.scheme.has_mac:
        mac = public_c * x.mac
        if not public_d.is_zero():
            if mac_key is None:
                raise SharingError("MAC key share required for authenticated constant addition")
            mac = mac + mac_key.alpha_i * public_d
    return Share(x.scheme, x.owner, value, mac, x.eval_point)


def lagrange_coeffs_at_zero(eval_points: Sequence[FieldElement]) -> list[FieldElement]:
    """Weights w_i with sum_i w_i * f(x_i) = f(0) for degree < len(points)."""
    coeffs = []
    for i, xi in enumerate(eval_points):
        num = FieldElement.one(xi.modulus)
        den = FieldElement.one(xi.modulus)
        for j, xj in enumerate(eval_points):
            if i != j:
                num = num * xj
                den = den * (xj - xi)
        coeffs.append(num * den.inv())
    return coeffs


def _lagrange_coeffs_at(eval_points: Sequence[FieldElement], x: FieldElement) -> list[FieldElement]:
    coeffs = []
    for i, xi in enumerate(eval_points):
        num = FieldElement.one(xi.modulus)
        den = FieldElement.one(xi.modulus)
        for j, xj in enumerate(eval_points):
            if i != j:
                num = num * (x - xj)
                den = den * (xi - xj)
        coeffs.append(num * den.inv())
    return coeffs


def _check_distinct_owners(shares: Sequence[Share]) -> None:
    owners = [s.owner for s in shares]
    if len(set(owners)) != len(owners):
        raise SharingError("duplicate share owners")


def open_shares(shares: Sequence[Share], n: int, t: int) -> FieldElement:
    """Reconstruct the secret from a qualified set of shares.

    SHAMIR_CHECKED verifies that every supplied share lies on the degree-<=t
    polynomial interpolated from the first t+1 (error detection, not
    correction) and aborts on inconsistency.  ADDITIVE_MAC reconstruction is
    plain summation here; authentication is deferred to the batched MAC
    check.
    """
    if not shares:
        raise SharingError("no shares")
    scheme = shares[0].scheme
    if any(s.scheme is not scheme for s in shares):
        raise SharingError("scheme mismatch")
    _check_distinct_owners(shares)

    if not scheme.is_shamir:
        if len(shares) != n:
            raise SharingError(f"additive open needs all {n} shares, got {len(shares)}")
        total = FieldElement.zero(shares[0].value.modulus)
        for s in shares:
            total = total + s.value
        return total

    if len(shares) < t + 1:
        raise SharingError(f"Shamir open needs at least {t + 1} shares, got {len(shares)}")
    ordered = sorted(shares, key=lambda s: s.eval_point.value)
    base, rest = ordered[: t + 1], ordered[t + 1:]
    xs = [s.eval_point for s in base]
    coeffs = lagrange_coeffs_at_zero(xs)
    secret = FieldElement.zero(xs[0].modulus)
    for c, s in zip(coeffs, base):
        secret = secret + c * s.value

    if scheme is SchemeId.SHAMIR_CHECKED:
        for extra in rest:
            at = _lagrange_coeffs_at(xs, extra.eval_point)
            expect = FieldElement.zero(xs[0].modulus)
            for c, s in zip(at, base):
                expect = expect + c * s.value
            if expect != extra.value:
                raise ProtocolAbort("corrupted share detected")
    return secret


def open_point_shares(shares: Sequence[PointShare], n: int, t: int) -> GroupPoint:
    """Reconstruct a shared point under the scheme's combination rule.

    Mirrors open_shares with the scalar combination lifted into the group;
    SHAMIR_CHECKED verifies redundant point shares against the interpolated
    point polynomial and aborts on mismatch.
    """
    if not shares:
        raise SharingError("no shares")
    scheme = shares[0].scheme
    owners = [s.owner for s in shares]
    if len(set(owners)) != len(owners):
        raise SharingError("duplicate share owners")

    if not scheme.is_shamir:
        if len(shares) != n:
            raise SharingError(f"additive point open needs all {n} shares, got {len(shares)}")
        acc = GroupPoint.identity()
        for s in shares:
            acc = acc + s.value
        return acc

    if len(shares) < t + 1:
        raise SharingError(f"Shamir point open needs at least {t + 1} shares")
    ordered = sorted(shares, key=lambda s: s.owner)
    base, rest = ordered[: t + 1], ordered[t + 1:]
    xs = [FieldElement(s.owner) for s in base]
    coeffs = lagrange_coeffs_at_zero(xs)
    acc = GroupPoint.identity()
    for c, s in zip(coeffs, base):
        acc = acc + scalar_mul(c, s.value)

    if scheme is SchemeId.SHAMIR_CHECKED:
        for extra in rest:
            at = _lagrange_coeffs_at(xs, FieldElement(extra.owner))
            expect = GroupPoint.identity()
            for c, s in zip(at, base):
                expect = expect + scalar_mul(c, s.value)
            if expect != extra.value:
                raise ProtocolAbort("corrupted share detected")
    return acc


# --- Deferred SPDZ MAC check -------------------------------------------------
#
# After a batch of authenticated opens, each party computes
#     sigma_i = sum_j w_j * (mac_share_i(a_j) - alpha_i * a_j)
# with public weights w_j derived from the session transcript, commits to
# sigma_i (hash commitment), then reveals.  The batch is accepted iff the
# commitments check out and sum_i sigma_i = 0.


class MacCheckAccumulator:
    """Per-session batch of opened authenticated values awaiting the check.

    Mutated only by the session's single protocol-driver activity.
    """

    def __init__(self, session_id: bytes, modulus: int = CURVE_ORDER) -> None:
        self.modulus = modulus
        self._entries: list[tuple[FieldElement, FieldElement]] = []
        self._transcript = hashlib.sha256(session_id)

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, opened: FieldElement, mac_share: FieldElement) -> None:
        self._entries.append((opened, mac_share))
        self._transcript.update(opened.value.to_bytes(32, "big"))

    def weights(self) -> list[FieldElement]:
        digest = self._transcript.digest()
        out = []
        for j in range(len(self._entries)):
            w = hashlib.sha256(digest + j.to_bytes(4, "big")).digest()
            out.append(FieldElement(int.from_bytes(w, "big"), self.modulus))
        return out

    def sigma(self, mac_key: MacKeyShare) -> FieldElement:
        acc = FieldElement.zero(self.modulus)
        for w, (value, mac_share) in zip(self.weights(), self._entries):
            acc = acc + w * (mac_share - mac_key.alpha_i * value)
        return acc

    def clear(self) -> None:
        self._entries = []


def mac_commit(sigma: FieldElement, opening: bytes) -> bytes:
    if len(opening) != 32:
        raise SharingError("commitment opening must be 32 bytes")
    return hashlib.sha256(sigma.value.to_bytes(32, "big") + opening).digest()


def mac_check_evaluate(
    commitments: dict[int, bytes],
    reveals: dict[int, tuple[FieldElement, bytes]],
) -> None:
    """Verify the commit/reveal transcript of one batched MAC check.

    Raises ProtocolAbort("equivocation detected") when a reveal does not match
    its commitment and ProtocolAbort("MAC check failed") when the sigmas do
    not cancel.
    """
    total: Optional[FieldElement] = None
    for party, (sigma, opening) in sorted(reveals.items()):
        if mac_commit(sigma, opening) != commitments.get(party):
            raise ProtocolAbort("equivocation detected")
        total = sigma if total is None else total + sigma
    if total is None or not total.is_zero():
        raise ProtocolAbort("MAC check failed")
