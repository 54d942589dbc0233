"""Fixed-point field encoding and communication-less shared evaluation.

The runtime works over Z_p for a large prime p (default the Mersenne prime
2^127 - 1).  Reals are encoded as round(v * 2^f) mod p with f fractional
bits.  Polynomial coefficients are additively secret shared among k parties;
monomial values of a public input are computed in the clear by every party.
Each party's answer is then a plain linear functional of its own coefficient
shares,

    z_i = sum_t a_i[t] * m[t]   (mod p),

and the true output is z_1 + ... + z_k because additive sharing commutes
with linear maps.  No party ever sends anything to another party: the only
flows are dealer -> party (share distribution), client -> party (input
distribution), and party -> client (one output share each).  The product of
a share (scale f) and a monomial value (scale f) sits at scale 2f, and with
only this single multiplication depth no rescaling protocol is needed; the
client divides by 2^(2f) once after reconstruction.

For secret-shared inputs the client shares the power vector [x, x^2, ...,
x^k] instead of x itself, which keeps the evaluation linear in shared
quantities.  The product of a shared coefficient and a shared power is
bilinear, and additive shares admit no local procedure for it, so a
correlated-randomness dealer (the model owner, who knows the coefficients)
issues per-query packets that reduce each product to the same local
linear-combination shape.  See ``ProductDealer``.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field

from .compiler import ExpandedNetworkPoly
from .errors import (
    FieldOverflowError,
    FingerprintMismatchError,
    MissingRandomnessError,
    ModelParseError,
    ScaleMismatchError,
    UnsupportedStructureError,
    ValidationError,
)

DEFAULT_FIELD_BITS = 127
DEFAULT_FRAC_BITS = 24

# Mersenne primes large enough to be useful here, keyed by exponent.
KNOWN_FIELD_PRIMES = {
    61: 2**61 - 1,
    89: 2**89 - 1,
    107: 2**107 - 1,
    127: 2**127 - 1,
}

_MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def _is_prime(n: int) -> bool:
    """Miller-Rabin; deterministic for n < 3.3e24 with these witnesses."""
    if n < 2:
        return False
    for w in _MR_WITNESSES:
        if n % w == 0:
            return n == w
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for w in _MR_WITNESSES:
        x = pow(w, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class FixedPointParams:
    """Field prime and fractional precision.

    ``magnitude_bound`` M satisfies 2 * M * 2^(2f) < p, so any value with
    |v| <= M is representable at scale 2f with an unambiguous centered lift.
    """

    p: int = KNOWN_FIELD_PRIMES[127]
    frac_bits: int = DEFAULT_FRAC_BITS

    def __post_init__(self):
        if self.frac_bits < 1:
            raise ValidationError("frac_bits must be at least 1")
        if self.p not in KNOWN_FIELD_PRIMES.values() and not _is_prime(self.p):
            raise ValidationError(f"{self.p} is not prime")
        if self.magnitude_bound < 1:
            raise ValidationError(
                f"p = {self.p} leaves no headroom at 2*{self.frac_bits} "
                f"fractional bits")

    @property
    def magnitude_bound(self) -> int:
        return (self.p - 1) >> (2 * self.frac_bits + 1)


def params_for_bits(field_bits: int = DEFAULT_FIELD_BITS,
                    frac_bits: int = DEFAULT_FRAC_BITS) -> FixedPointParams:
    if field_bits not in KNOWN_FIELD_PRIMES:
        raise ValidationError(
            f"no known field prime with exponent {field_bits}; choose from "
            f"{sorted(KNOWN_FIELD_PRIMES)}")
    return FixedPointParams(p=KNOWN_FIELD_PRIMES[field_bits],
                            frac_bits=frac_bits)


def encode_fixed(v: float, params: FixedPointParams,
                 scale_bits: int | None = None) -> int:
    """round(v * 2^scale) mod p, rejecting magnitudes past the field bound.

    Python's round applies half-to-even; multiplying a float64 by a power of
    two is exact, so the encoding is deterministic across platforms.
    """
    scale_bits = params.frac_bits if scale_bits is None else scale_bits
    bound = params.magnitude_bound
    if not abs(v) <= bound:  # also catches NaN
        raise FieldOverflowError(
            f"value {v!r} exceeds the field magnitude bound {bound}")
    return round(v * (1 << scale_bits)) % params.p


def decode_fixed(e: int, params: FixedPointParams,
                 scale_bits: int | None = None) -> float:
    """Centered lift of e, then division by 2^scale."""
    scale_bits = params.frac_bits if scale_bits is None else scale_bits
    e %= params.p
    if e > params.p // 2:
        e -= params.p
    return e / (1 << scale_bits)


# ---------------------------------------------------------------------------
# additive sharing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Share:
    party_id: int
    value: int


@dataclass
class Transcript:
    """Message counters for the three channels the protocol permits.

    There is deliberately no way for a party to address another party;
    tests assert messages_party_to_party stays zero through entire runs.
    Input distribution (client -> party) is the protocol's entry point and
    is not metered.
    """

    messages_party_to_party: int = 0
    messages_dealer_to_party: int = 0
    messages_party_to_client: int = 0


def share_secret(e: int, k: int, params: FixedPointParams,
                 rng: random.Random) -> list[Share]:
    """Split e into k uniformly random addends mod p."""
    if k < 2:
        raise ValidationError("need at least 2 parties")
    parts = [rng.randrange(params.p) for _ in range(k - 1)]
    last = (e - sum(parts)) % params.p
    return [Share(i, v) for i, v in enumerate(parts + [last])]


def reconstruct(shares: list[Share], params: FixedPointParams) -> int:
    if len(shares) < 2:
        raise ValidationError("need at least 2 shares")
    ids = [s.party_id for s in shares]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate party id in {sorted(ids)}")
    return sum(s.value for s in shares) % params.p


# ---------------------------------------------------------------------------
# dealing a program
# ---------------------------------------------------------------------------

def program_fingerprint(expanded: ExpandedNetworkPoly,
                        params: FixedPointParams) -> str:
    """Digest of the public structure: monomial support, field, and scale.

    Coefficients are secret and deliberately excluded; every share file
    derived from one dealing carries this value so mismatched artifacts are
    caught at reconstruction instead of producing garbage.
    """
    doc = {
        "p": str(params.p),
        "f": params.frac_bits,
        "num_vars": expanded.num_vars,
        "outputs": [[list(e) for e in sorted(p.terms)]
                    for p in expanded.polys],
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class PartyProgram:
    """One party's view: public monomial support, private coefficient shares.

    ``monomials[o]`` lists exponent tuples for output o in sorted order, and
    ``coeff_shares[o]`` is aligned with it.
    """

    party_id: int
    k: int
    params: FixedPointParams
    fingerprint: str
    num_vars: int
    monomials: list[list[tuple[int, ...]]]
    coeff_shares: list[list[int]]


def deal_program(expanded: ExpandedNetworkPoly, k: int,
                 params: FixedPointParams, rng: random.Random,
                 transcript: Transcript | None = None) -> list[PartyProgram]:
    """Encode every coefficient at scale f and share it k ways."""
    fingerprint = program_fingerprint(expanded, params)
    monomials = [sorted(p.terms) for p in expanded.polys]
    shares: list[list[list[int]]] = [[[] for _ in expanded.polys]
                                     for _ in range(k)]
    for o, poly in enumerate(expanded.polys):
        for exps in monomials[o]:
            c = poly.terms[exps]
            try:
                e = encode_fixed(c, params)
            except FieldOverflowError as exc:
                raise FieldOverflowError(
                    f"output {o}, monomial {exps}: {exc}; use a larger field "
                    f"or fewer fractional bits") from exc
            for s in share_secret(e, k, params, rng):
                shares[s.party_id][o].append(s.value)
    if transcript is not None:
        transcript.messages_dealer_to_party += k
    return [
        PartyProgram(party_id=i, k=k, params=params, fingerprint=fingerprint,
                     num_vars=expanded.num_vars, monomials=monomials,
                     coeff_shares=shares[i])
        for i in range(k)
    ]


# ---------------------------------------------------------------------------
# public-input evaluation
# ---------------------------------------------------------------------------

def _encoded_monomials(x, monomials: list[tuple[int, ...]],
                       params: FixedPointParams) -> list[int]:
    """Encode each monomial's value at scale f, via per-variable power
    tables; the clear oracle and every party share this exact code path."""
    xs = [float(v) for v in x]
    max_exp = [0] * len(xs)
    for exps in monomials:
        for v, e in enumerate(exps):
            if e > max_exp[v]:
                max_exp[v] = e
    tables = []
    for v, xv in enumerate(xs):
        tab = [1.0]
        for _ in range(max_exp[v]):
            tab.append(tab[-1] * xv)
        tables.append(tab)
    out = []
    for exps in monomials:
        m = 1.0
        for v, e in enumerate(exps):
            if e:
                m *= tables[v][e]
        out.append(encode_fixed(m, params))
    return out


@dataclass
class OutputShares:
    party_id: int
    k: int
    fingerprint: str
    scale_bits: int
    values: list[int]


def party_eval_public_input(pp: PartyProgram, x,
                            transcript: Transcript | None = None
                            ) -> OutputShares:
    """One party's whole job: a local linear combination per output.

    Nothing here can address another party; the result is this party's
    single message to the client.
    """
    if len(x) != pp.num_vars:
        raise ValidationError(
            f"input has {len(x)} coordinates, program has {pp.num_vars}")
    p = pp.params.p
    values = []
    for monos, coeffs in zip(pp.monomials, pp.coeff_shares):
        ms = _encoded_monomials(x, monos, pp.params)
        acc = 0
        for a, m in zip(coeffs, ms):
            acc = (acc + a * m) % p
        values.append(acc)
    if transcript is not None:
        transcript.messages_party_to_client += 1
    return OutputShares(party_id=pp.party_id, k=pp.k,
                        fingerprint=pp.fingerprint,
                        scale_bits=2 * pp.params.frac_bits, values=values)


@dataclass
class ReconstructedOutput:
    values: list[float]
    predicted_class: int
    raw: list[int]


def reconstruct_output(shares: list[OutputShares], params: FixedPointParams
                       ) -> ReconstructedOutput:
    """Sum the k output shares, lift, and rescale once by 2^(2f)."""
    if not shares:
        raise ValidationError("no output shares")
    k = shares[0].k
    fp = shares[0].fingerprint
    for s in shares:
        if s.fingerprint != fp:
            raise FingerprintMismatchError(
                f"party {s.party_id} evaluated {s.fingerprint[:12]}..., "
                f"party {shares[0].party_id} evaluated {fp[:12]}...")
        if s.scale_bits != 2 * params.frac_bits:
            raise ScaleMismatchError(
                f"party {s.party_id} answered at scale {s.scale_bits}, "
                f"expected {2 * params.frac_bits}")
        if s.k != k:
            raise ValidationError("parties disagree on the party count")
    ids = [s.party_id for s in shares]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate party id in {sorted(ids)}")
    if len(shares) != k:
        raise ValidationError(
            f"{len(shares)} shares for a {k}-party dealing; additive "
            f"sharing needs every share")
    n_out = len(shares[0].values)
    if any(len(s.values) != n_out for s in shares):
        raise ValidationError("parties disagree on the output count")
    raw = [sum(s.values[o] for s in shares) % params.p for o in range(n_out)]
    values = [decode_fixed(r, params, 2 * params.frac_bits) for r in raw]
    best = max(range(n_out), key=lambda o: (values[o], -o))
    return ReconstructedOutput(values=values, predicted_class=best, raw=raw)


def clear_fixed_eval(expanded: ExpandedNetworkPoly, x,
                     params: FixedPointParams) -> list[int]:
    """The fixed-point oracle: the same encode-multiply-sum arithmetic with
    unshared coefficients.  Shared evaluation must match this bit for bit."""
    out = []
    for poly in expanded.polys:
        monos = sorted(poly.terms)
        ms = _encoded_monomials(x, monos, params)
        acc = 0
        for exps, m in zip(monos, ms):
            acc = (acc + encode_fixed(poly.terms[exps], params) * m) % params.p
        out.append(acc)
    return out


# ---------------------------------------------------------------------------
# secret-shared inputs
# ---------------------------------------------------------------------------

@dataclass
class InputPowerShares:
    """Additive shares of the encoded power vector [x, x^2, ..., x^k_max].

    The client keeps ``client_powers`` (the clear encodings) to derive query
    masks; each party receives only its slice.
    """

    k: int
    k_max: int
    params: FixedPointParams
    shares: list[list[Share]]  # indexed by power-1
    client_powers: list[int]

    def party_slice(self, party_id: int) -> dict[int, int]:
        out = {}
        for j, sh in enumerate(self.shares, start=1):
            out[j] = next(s.value for s in sh if s.party_id == party_id)
        return out


def share_input_powers(x: float, k_max: int, k: int,
                       params: FixedPointParams,
                       rng: random.Random) -> InputPowerShares:
    """Encode and share x^1 .. x^k_max.  Sharing the powers rather than x
    keeps every later step linear in shared quantities."""
    if k_max < 1:
        raise ValidationError("k_max must be at least 1")
    powers = []
    v = 1.0
    for j in range(1, k_max + 1):
        v = v * x
        if abs(v) > params.magnitude_bound:
            raise FieldOverflowError(
                f"x^{j} = {v!r} exceeds the field magnitude bound; reduce "
                f"the degree or enlarge the field")
        powers.append(encode_fixed(v, params))
    return InputPowerShares(
        k=k, k_max=k_max, params=params,
        shares=[share_secret(e, k, params, rng) for e in powers],
        client_powers=powers)


@dataclass
class SecretQueryClient:
    """Client half of one query's correlated randomness: the power masks."""

    query_id: int
    masks: dict[int, int]  # power -> s_j

    def epsilons(self, powers: InputPowerShares) -> dict[int, int]:
        """Public offsets e_j = X_j - s_j mod p, broadcast to all parties."""
        p = powers.params.p
        eps = {}
        for j, s in self.masks.items():
            if j > powers.k_max:
                raise MissingRandomnessError(
                    f"query needs x^{j} but only {powers.k_max} powers were "
                    f"shared")
            eps[j] = (powers.client_powers[j - 1] - s) % p
        return eps


@dataclass
class SecretQueryParty:
    """One party's packet for one query: shares of coeff*mask products.

    ``product_shares[o][t]`` aligns with the program's monomial list for
    output o; entries for the constant monomial are None.
    """

    query_id: int
    party_id: int
    product_shares: list[list[int | None]]


class ProductDealer:
    """Correlated-randomness dealer for secret-input queries.

    Trust model: the dealer is the model owner.  It already knows every
    coefficient (it dealt them), never sees the input or any input share,
    and per query only hands out additive shares of coeff * mask for a mask
    it drew itself.  Each party then computes, locally,

        z_i = a_i(const) * 2^f + sum_j (a_i(j) * eps_j + d_i(j)),

    with eps_j = X_j - s_j broadcast by the client.  Summed over parties the
    masks cancel: sum_i z_i = sum_j A_j (X_j - s_j) + A_j s_j = sum_j A_j X_j,
    bit-identical to the public-input pipeline at the same scale 2f.  The
    parties' own power shares stay with them; a different product protocol
    can consume them through this same packet interface.
    """

    def __init__(self, expanded: ExpandedNetworkPoly, k: int,
                 params: FixedPointParams):
        if expanded.num_vars != 1:
            raise UnsupportedStructureError(
                "secret-input evaluation handles univariate programs; "
                "multivariate inputs need a different product protocol")
        self.k = k
        self.params = params
        self.fingerprint = program_fingerprint(expanded, params)
        self.monomials = [sorted(p.terms) for p in expanded.polys]
        self._coeffs = [[encode_fixed(p.terms[e], params)
                         for e in sorted(p.terms)]
                        for p in expanded.polys]
        self._next_query = 0

    def powers_needed(self) -> int:
        return max((e[0] for monos in self.monomials for e in monos),
                   default=0)

    def new_query(self, rng: random.Random,
                  transcript: Transcript | None = None
                  ) -> tuple[SecretQueryClient, list[SecretQueryParty]]:
        qid = self._next_query
        self._next_query += 1
        p = self.params.p
        powers = sorted({e[0] for monos in self.monomials for e in monos
                         if e[0] >= 1})
        masks = {j: rng.randrange(p) for j in powers}
        packets = [SecretQueryParty(query_id=qid, party_id=i,
                                    product_shares=[[] for _ in self.monomials])
                   for i in range(self.k)]
        for o, monos in enumerate(self.monomials):
            for t, exps in enumerate(monos):
                if exps[0] == 0:
                    for pk in packets:
                        pk.product_shares[o].append(None)
                    continue
                prod = self._coeffs[o][t] * masks[exps[0]] % p
                for s in share_secret(prod, self.k, self.params, rng):
                    packets[s.party_id].product_shares[o].append(s.value)
        if transcript is not None:
            transcript.messages_dealer_to_party += self.k
        return SecretQueryClient(query_id=qid, masks=masks), packets


def secret_input_eval(pp: PartyProgram, power_shares: dict[int, int],
                      epsilons: dict[int, int], packet: SecretQueryParty,
                      transcript: Transcript | None = None) -> OutputShares:
    """One party's local evaluation on a secret-shared input.

    ``power_shares`` is this party's slice of the shared power vector.  The
    reference dealer scheme consumes the broadcast offsets and the packet;
    the raw power shares are validated here and kept for protocols that
    combine them directly (the packet interface does not care which).
    """
    if pp.num_vars != 1:
        raise UnsupportedStructureError(
            "secret-input evaluation handles univariate programs")
    if packet.party_id != pp.party_id:
        raise ValidationError(
            f"packet for party {packet.party_id} given to party {pp.party_id}")
    p = pp.params.p
    one = 1 << pp.params.frac_bits  # encoding of x^0
    values = []
    for o, (monos, coeffs) in enumerate(zip(pp.monomials, pp.coeff_shares)):
        prods = packet.product_shares[o]
        if len(prods) != len(monos):
            raise MissingRandomnessError(
                f"output {o}: packet has {len(prods)} entries for "
                f"{len(monos)} monomials")
        acc = 0
        for t, (exps, a) in enumerate(zip(monos, coeffs)):
            j = exps[0]
            if j == 0:
                acc = (acc + a * one) % p
                continue
            if j not in epsilons:
                raise MissingRandomnessError(
                    f"no broadcast offset for power {j}")
            if j not in power_shares:
                raise MissingRandomnessError(
                    f"party {pp.party_id} holds no share of x^{j}")
            if prods[t] is None:
                raise MissingRandomnessError(
                    f"output {o}, monomial {exps}: dealer packet is missing "
                    f"the product share")
            acc = (acc + a * epsilons[j] + prods[t]) % p
        values.append(acc)
    if transcript is not None:
        transcript.messages_party_to_client += 1
    return OutputShares(party_id=pp.party_id, k=pp.k,
                        fingerprint=pp.fingerprint,
                        scale_bits=2 * pp.params.frac_bits, values=values)


# ---------------------------------------------------------------------------
# share files
# ---------------------------------------------------------------------------

SHARES_FORMAT = "polydnn-shares-v1"
OUTPUT_FORMAT = "polydnn-output-share-v1"


def write_party_program(pp: PartyProgram, path: str) -> None:
    doc = {
        "format": SHARES_FORMAT,
        "party_id": pp.party_id,
        "k": pp.k,
        "p": str(pp.params.p),
        "f": pp.params.frac_bits,
        "fingerprint": pp.fingerprint,
        "num_vars": pp.num_vars,
        "outputs": [
            {"monomials": [list(e) for e in monos],
             "shares": [str(v) for v in coeffs]}
            for monos, coeffs in zip(pp.monomials, pp.coeff_shares)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def read_party_program(path: str) -> PartyProgram:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelParseError(f"{path}: not valid JSON: {exc}") from exc
    if doc.get("format") != SHARES_FORMAT:
        raise ModelParseError(
            f"{path}: unknown share format {doc.get('format')!r}")
    try:
        params = FixedPointParams(p=int(doc["p"]), frac_bits=int(doc["f"]))
        return PartyProgram(
            party_id=int(doc["party_id"]), k=int(doc["k"]), params=params,
            fingerprint=doc["fingerprint"], num_vars=int(doc["num_vars"]),
            monomials=[[tuple(e) for e in o["monomials"]]
                       for o in doc["outputs"]],
            coeff_shares=[[int(v) for v in o["shares"]]
                          for o in doc["outputs"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelParseError(f"{path}: malformed share file: {exc}") from exc


def write_output_shares(os_: OutputShares, path: str) -> None:
    doc = {
        "format": OUTPUT_FORMAT,
        "party_id": os_.party_id,
        "k": os_.k,
        "fingerprint": os_.fingerprint,
        "scale_bits": os_.scale_bits,
        "values": [str(v) for v in os_.values],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def read_output_shares(path: str) -> OutputShares:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelParseError(f"{path}: not valid JSON: {exc}") from exc
    if doc.get("format") != OUTPUT_FORMAT:
        raise ModelParseError(
            f"{path}: unknown output-share format {doc.get('format')!r}")
    try:
        return OutputShares(
            party_id=int(doc["party_id"]), k=int(doc["k"]),
            fingerprint=doc["fingerprint"],
            scale_bits=int(doc["scale_bits"]),
            values=[int(v) for v in doc["values"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelParseError(f"{path}: malformed output share: {exc}") from exc
