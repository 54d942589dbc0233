"""Field encoding, sharing, and communication-less evaluation tests.

Hand-frozen oracles use a small prime (p = 101, f = 2) where every encoding
can be checked by hand.  The bit-exactness tests compare the shared
pipeline against clear_fixed_eval, plus one fully hand-computed raw value so
the oracle itself is anchored independently.
"""

import random

import pytest
from scipy import stats

from polydnn.compiler import ExpandedNetworkPoly
from polydnn.errors import (
    FieldOverflowError,
    FingerprintMismatchError,
    MissingRandomnessError,
    ModelParseError,
    ScaleMismatchError,
    UnsupportedStructureError,
    ValidationError,
)
from polydnn.mpc import (
    KNOWN_FIELD_PRIMES,
    FixedPointParams,
    ProductDealer,
    Transcript,
    clear_fixed_eval,
    deal_program,
    decode_fixed,
    encode_fixed,
    params_for_bits,
    party_eval_public_input,
    program_fingerprint,
    read_output_shares,
    read_party_program,
    reconstruct,
    reconstruct_output,
    secret_input_eval,
    share_input_powers,
    share_secret,
    write_output_shares,
    write_party_program,
)
from polydnn.polyalg import SparseMultiPoly

TINY = FixedPointParams(p=101, frac_bits=2)  # magnitude bound 100 // 32 = 3


def replace_scale(o, scale_bits):
    from polydnn.mpc import OutputShares
    return OutputShares(party_id=o.party_id, k=o.k, fingerprint=o.fingerprint,
                        scale_bits=scale_bits, values=o.values)


def expanded(num_vars, *term_dicts):
    polys = [SparseMultiPoly(num_vars=num_vars, terms=dict(d))
             for d in term_dicts]
    return ExpandedNetworkPoly(
        num_vars=num_vars, polys=polys,
        total_degree=max((p.total_degree for p in polys), default=0),
        term_count=sum(p.term_count for p in polys))


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def test_encode_hand_values():
    assert encode_fixed(1.25, TINY) == 5       # round(1.25 * 4)
    assert encode_fixed(-1.25, TINY) == 96     # -5 mod 101
    assert encode_fixed(0.0, TINY) == 0
    assert encode_fixed(3.0, TINY) == 12       # exactly at the bound


def test_encode_rounds_half_to_even():
    assert encode_fixed(0.125, TINY) == 0      # round(0.5) -> 0
    assert encode_fixed(0.375, TINY) == 2      # round(1.5) -> 2


def test_encode_scale_override():
    assert encode_fixed(1.25, TINY, scale_bits=4) == 20


def test_decode_centered_lift():
    assert decode_fixed(96, TINY) == -1.25
    assert decode_fixed(5, TINY) == 1.25
    # 51 > p // 2 = 50, so it lifts to -50
    assert decode_fixed(51, TINY) == -12.5


def test_encode_decode_round_trip():
    rng = random.Random(7)
    params = params_for_bits(61, 16)
    for _ in range(200):
        v = rng.uniform(-100, 100)
        got = decode_fixed(encode_fixed(v, params), params)
        assert abs(got - v) <= 2.0 ** -17 + 1e-12


def test_encode_rejects_out_of_range():
    with pytest.raises(FieldOverflowError):
        encode_fixed(3.5, TINY)
    with pytest.raises(FieldOverflowError):
        encode_fixed(float("nan"), TINY)


def test_params_validation():
    with pytest.raises(ValidationError):
        FixedPointParams(p=100, frac_bits=2)        # composite
    with pytest.raises(ValidationError):
        FixedPointParams(p=101, frac_bits=0)
    with pytest.raises(ValidationError):
        FixedPointParams(p=101, frac_bits=3)        # no headroom
    assert params_for_bits(127, 24).p == 2**127 - 1
    with pytest.raises(ValidationError):
        params_for_bits(97)


def test_known_primes_are_prime():
    # cross-check the table against the Lucas-Lehmer test
    for exp, p in KNOWN_FIELD_PRIMES.items():
        assert p == 2**exp - 1
        s = 4
        for _ in range(exp - 2):
            s = (s * s - 2) % p
        assert s == 0


# ---------------------------------------------------------------------------
# sharing
# ---------------------------------------------------------------------------

def test_share_reconstruct_round_trip():
    rng = random.Random(0)
    params = params_for_bits(61, 8)
    for k in (2, 3, 5, 10):
        for _ in range(20):
            e = rng.randrange(params.p)
            shares = share_secret(e, k, params, rng)
            assert len(shares) == k
            assert [s.party_id for s in shares] == list(range(k))
            assert reconstruct(shares, params) == e


def test_share_requires_two_parties():
    with pytest.raises(ValidationError):
        share_secret(5, 1, TINY, random.Random(0))


def test_reconstruct_rejects_duplicate_parties():
    shares = share_secret(42, 3, TINY, random.Random(0))
    with pytest.raises(ValidationError):
        reconstruct([shares[0], shares[0]], TINY)


def test_share_values_cover_field_uniformly():
    # party 0's share of a fixed secret is a fresh uniform field element
    params = params_for_bits(61, 8)
    rng = random.Random(123)
    n, buckets = 4000, 16
    counts = [0] * buckets
    for _ in range(n):
        v = share_secret(7, 2, params, rng)[0].value
        counts[v * buckets // params.p] += 1
    res = stats.chisquare(counts)
    assert res.pvalue > 0.01


# ---------------------------------------------------------------------------
# dealing and public-input evaluation
# ---------------------------------------------------------------------------

def test_hand_computed_raw_output():
    # p(x) = 0.5 + 2x - x^2 at x = 1.5 with f = 4:
    #   enc(0.5) = 8, enc(2) = 32, enc(-1) = p - 16
    #   enc(1) = 16, enc(1.5) = 24, enc(2.25) = 36
    #   raw = 8*16 + 32*24 - 16*36 = 320, and 320 / 2^8 = 1.25 exactly
    params = FixedPointParams(p=KNOWN_FIELD_PRIMES[61], frac_bits=4)
    prog = expanded(1, {(0,): 0.5, (1,): 2.0, (2,): -1.0})
    raw = clear_fixed_eval(prog, [1.5], params)
    assert raw == [320]
    assert decode_fixed(320, params, 8) == 1.25


def test_shared_eval_is_bit_exact_vs_clear():
    params = params_for_bits(127, 24)
    prog = expanded(
        2,
        {(0, 0): 0.5, (1, 0): -1.25, (1, 1): 2.0, (0, 2): 0.125},
        {(2, 0): 1.0, (0, 1): -3.5, (0, 0): 0.25},
    )
    rng = random.Random(11)
    for k in (2, 3, 5, 10):
        t = Transcript()
        pps = deal_program(prog, k, params, rng, transcript=t)
        for _ in range(5):
            x = [rng.uniform(0, 1), rng.uniform(0, 1)]
            outs = [party_eval_public_input(pp, x, transcript=t)
                    for pp in pps]
            want = clear_fixed_eval(prog, x, params)
            got = [sum(o.values[j] for o in outs) % params.p
                   for j in range(2)]
            assert got == want
        assert t.messages_party_to_party == 0


def test_reconstruct_output_decodes_and_classifies():
    params = params_for_bits(127, 24)
    prog = expanded(1, {(0,): 0.5, (1,): 2.0}, {(0,): 1.0, (2,): -1.0})
    rng = random.Random(3)
    pps = deal_program(prog, 3, params, rng)
    x = [0.75]
    outs = [party_eval_public_input(pp, x) for pp in pps]
    rec = reconstruct_output(outs, params)
    # true outputs: 2.0 and 0.4375; quantization stays far below 1e-6
    assert abs(rec.values[0] - 2.0) < 1e-6
    assert abs(rec.values[1] - 0.4375) < 1e-6
    assert rec.predicted_class == 0


def test_reconstruct_output_tie_prefers_lowest_index():
    params = params_for_bits(61, 8)
    prog = expanded(1, {(0,): 1.0}, {(0,): 1.0})
    pps = deal_program(prog, 2, params, random.Random(0))
    outs = [party_eval_public_input(pp, [0.5]) for pp in pps]
    assert reconstruct_output(outs, params).predicted_class == 0


def test_transcript_counts_permitted_channels_only():
    params = params_for_bits(61, 8)
    prog = expanded(1, {(1,): 1.0})
    t = Transcript()
    pps = deal_program(prog, 4, params, random.Random(0), transcript=t)
    assert t.messages_dealer_to_party == 4
    outs = [party_eval_public_input(pp, [0.5], transcript=t) for pp in pps]
    assert t.messages_party_to_client == 4
    assert t.messages_party_to_party == 0
    reconstruct_output(outs, params)
    assert t.messages_party_to_party == 0


def test_dealing_is_deterministic_per_seed():
    params = params_for_bits(61, 8)
    prog = expanded(1, {(0,): 0.5, (3,): -0.25})
    a = deal_program(prog, 3, params, random.Random(9))
    b = deal_program(prog, 3, params, random.Random(9))
    assert [pp.coeff_shares for pp in a] == [pp.coeff_shares for pp in b]


def test_deal_rejects_oversized_coefficient():
    prog = expanded(1, {(1,): 100.0})  # TINY bound is 3
    with pytest.raises(FieldOverflowError, match="monomial"):
        deal_program(prog, 2, TINY, random.Random(0))


def test_fingerprint_covers_structure_not_coefficients():
    params = params_for_bits(61, 8)
    a = expanded(1, {(0,): 1.0, (2,): 2.0})
    b = expanded(1, {(0,): -0.5, (2,): 9.0})
    c = expanded(1, {(0,): 1.0, (3,): 2.0})
    assert program_fingerprint(a, params) == program_fingerprint(b, params)
    assert program_fingerprint(a, params) != program_fingerprint(c, params)
    other = params_for_bits(61, 10)
    assert program_fingerprint(a, params) != program_fingerprint(a, other)


def test_reconstruct_output_rejects_mismatches():
    params = params_for_bits(61, 8)
    prog = expanded(1, {(1,): 1.0})
    prog2 = expanded(1, {(2,): 1.0})
    pps = deal_program(prog, 2, params, random.Random(0))
    pps2 = deal_program(prog2, 2, params, random.Random(0))
    outs = [party_eval_public_input(pp, [0.5]) for pp in pps]
    outs2 = [party_eval_public_input(pp, [0.5]) for pp in pps2]
    with pytest.raises(FingerprintMismatchError):
        reconstruct_output([outs[0], outs2[1]], params)
    bad = replace_scale(outs[1], 8)
    with pytest.raises(ScaleMismatchError):
        reconstruct_output([outs[0], bad], params)
    with pytest.raises(ValidationError):
        reconstruct_output([outs[0]], params)       # missing a share
    with pytest.raises(ValidationError):
        reconstruct_output([outs[0], outs[0]], params)
    with pytest.raises(ValidationError):
        reconstruct_output([], params)


# ---------------------------------------------------------------------------
# secret-shared inputs
# ---------------------------------------------------------------------------

def secret_pipeline(prog, x, k, params, seed):
    rng = random.Random(seed)
    t = Transcript()
    pps = deal_program(prog, k, params, rng, transcript=t)
    dealer = ProductDealer(prog, k, params)
    powers = share_input_powers(x, dealer.powers_needed(), k, params, rng)
    client, packets = dealer.new_query(rng, transcript=t)
    eps = client.epsilons(powers)
    outs = [secret_input_eval(pps[i], powers.party_slice(i), eps,
                              packets[i], transcript=t)
            for i in range(k)]
    return pps, outs, t


def test_secret_input_eval_matches_clear_bit_exact():
    params = params_for_bits(127, 24)
    rng = random.Random(21)
    terms = {(j,): rng.uniform(-2, 2) for j in range(11)}
    prog = expanded(1, terms)
    x = 0.8125
    _, outs, t = secret_pipeline(prog, x, 3, params, seed=5)
    want = clear_fixed_eval(prog, [x], params)
    got = [sum(o.values[0] for o in outs) % params.p]
    assert got == want
    assert t.messages_party_to_party == 0
    rec = reconstruct_output(outs, params)
    true = sum(c * x ** e[0] for e, c in terms.items())
    assert abs(rec.values[0] - true) < 1e-5


def test_secret_input_fresh_masks_per_query():
    params = params_for_bits(61, 8)
    prog = expanded(1, {(0,): 0.5, (1,): 1.5, (2,): -0.75})
    rng = random.Random(2)
    k = 3
    pps = deal_program(prog, k, params, rng)
    dealer = ProductDealer(prog, k, params)
    powers = share_input_powers(0.5, dealer.powers_needed(), k, params, rng)
    c1, p1 = dealer.new_query(rng)
    c2, p2 = dealer.new_query(rng)
    assert c1.query_id != c2.query_id
    assert c1.masks != c2.masks
    for client, packets in ((c1, p1), (c2, p2)):
        eps = client.epsilons(powers)
        outs = [secret_input_eval(pps[i], powers.party_slice(i), eps,
                                  packets[i]) for i in range(k)]
        assert [sum(o.values[0] for o in outs) % params.p] == \
            clear_fixed_eval(prog, [0.5], params)


def test_power_shares_reconstruct_to_encoded_powers():
    params = params_for_bits(61, 8)
    rng = random.Random(4)
    powers = share_input_powers(0.75, 4, 3, params, rng)
    for j in range(1, 5):
        got = reconstruct(powers.shares[j - 1], params)
        assert got == encode_fixed(0.75 ** j, params)
        assert got == powers.client_powers[j - 1]


def test_secret_input_missing_randomness_errors():
    params = params_for_bits(61, 8)
    prog = expanded(1, {(0,): 0.5, (2,): 1.0})
    rng = random.Random(6)
    k = 2
    pps = deal_program(prog, k, params, rng)
    dealer = ProductDealer(prog, k, params)
    powers = share_input_powers(0.5, 2, k, params, rng)
    client, packets = dealer.new_query(rng)
    eps = client.epsilons(powers)
    missing_eps = {j: v for j, v in eps.items() if j != 2}
    with pytest.raises(MissingRandomnessError, match="power 2"):
        secret_input_eval(pps[0], powers.party_slice(0), missing_eps,
                          packets[0])
    slim = {j: v for j, v in powers.party_slice(0).items() if j != 2}
    with pytest.raises(MissingRandomnessError, match="share of x"):
        secret_input_eval(pps[0], slim, eps, packets[0])
    with pytest.raises(ValidationError, match="party"):
        secret_input_eval(pps[0], powers.party_slice(0), eps, packets[1])


def test_secret_input_rejects_multivariate():
    params = params_for_bits(61, 8)
    prog = expanded(2, {(1, 1): 1.0})
    with pytest.raises(UnsupportedStructureError):
        ProductDealer(prog, 2, params)


def test_epsilons_reject_short_power_vector():
    params = params_for_bits(61, 8)
    prog = expanded(1, {(3,): 1.0})
    rng = random.Random(8)
    dealer = ProductDealer(prog, 2, params)
    powers = share_input_powers(0.5, 2, 2, params, rng)  # only x, x^2
    client, _ = dealer.new_query(rng)
    with pytest.raises(MissingRandomnessError):
        client.epsilons(powers)


def test_share_input_powers_overflow():
    params = params_for_bits(61, 8)  # bound about 1.4e13
    with pytest.raises(FieldOverflowError, match="x\\^"):
        share_input_powers(10.0, 30, 2, params, random.Random(0))


# ---------------------------------------------------------------------------
# share files
# ---------------------------------------------------------------------------

def test_party_program_file_round_trip(tmp_path):
    params = params_for_bits(127, 24)
    prog = expanded(2, {(0, 0): 0.5, (1, 2): -1.25}, {(3, 0): 2.0})
    pps = deal_program(prog, 3, params, random.Random(1))
    path = str(tmp_path / "party0.json")
    write_party_program(pps[0], path)
    back = read_party_program(path)
    assert back == pps[0]


def test_output_shares_file_round_trip(tmp_path):
    params = params_for_bits(127, 24)
    prog = expanded(1, {(1,): 1.0})
    pps = deal_program(prog, 2, params, random.Random(1))
    out = party_eval_public_input(pps[1], [0.25])
    path = str(tmp_path / "out1.json")
    write_output_shares(out, path)
    assert read_output_shares(path) == out


def test_share_file_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ModelParseError, match="format"):
        read_party_program(str(path))
    with pytest.raises(ModelParseError, match="format"):
        read_output_shares(str(path))
    path.write_text("not json")
    with pytest.raises(ModelParseError, match="JSON"):
        read_party_program(str(path))


def test_field_elements_survive_json_as_strings(tmp_path):
    # values near p = 2^127 - 1 are far beyond float53 precision
    params = params_for_bits(127, 24)
    prog = expanded(1, {(1,): 1.0})
    pps = deal_program(prog, 2, params, random.Random(2))
    big = max(v for pp in pps for o in pp.coeff_shares for v in o)
    assert big > 2**60  # the round trip below would corrupt it as a float
    path = str(tmp_path / "p.json")
    write_party_program(pps[0], path)
    assert read_party_program(path).coeff_shares == pps[0].coeff_shares
