import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tcdrec.transfer import PatternEncoder, TransferGate, preference_factors

from oracles import relative_gradient_error

D = 8


def make_pattern(flags_rows, buckets_rows=None):
    flags = torch.as_tensor(flags_rows, dtype=torch.long)
    mask = flags >= 0
    flags = flags.clamp(min=0)
    if buckets_rows is None:
        buckets = torch.ones_like(flags)
    else:
        buckets = torch.as_tensor(buckets_rows, dtype=torch.long)
    return flags, buckets, mask


class TestPatternEncoder:
    def setup_method(self):
        torch.manual_seed(0)
        self.enc = PatternEncoder(D, bucket_count=16, max_len=6)

    def test_output_dimension(self):
        flags, buckets, mask = make_pattern([[0, 1, 0]])
        assert self.enc(flags, buckets, mask).shape == (1, D)

    def test_single_element_pattern(self):
        flags, buckets, mask = make_pattern([[1, -1, -1]])
        out = self.enc(flags, buckets, mask)
        assert out.shape == (1, D)
        assert out.abs().sum() > 0

    def test_order_sensitivity(self):
        f1, b1, m1 = make_pattern([[0, 1, 0]], [[1, 5, 9]])
        f2, b2, m2 = make_pattern([[0, 1, 0]], [[9, 5, 1]])
        assert not torch.allclose(self.enc(f1, b1, m1), self.enc(f2, b2, m2))

    def test_empty_pattern_is_zero(self):
        flags, buckets, mask = make_pattern([[-1, -1]])
        assert torch.equal(self.enc(flags, buckets, mask), torch.zeros(1, D))

    def test_padding_transparency(self):
        f1, b1, m1 = make_pattern([[0, 1]], [[2, 3]])
        f2, b2, m2 = make_pattern([[0, 1, -1, -1]], [[2, 3, 0, 0]])
        assert torch.allclose(self.enc(f1, b1, m1), self.enc(f2, b2, m2), atol=1e-6)


class TestPreferenceFactors:
    def test_all_a_events_make_rb_semantic_only(self):
        z = torch.randn(1, 3, D)
        flags = torch.zeros(1, 3, dtype=torch.long)
        mask = torch.ones(1, 3, dtype=torch.bool)
        z_llm = torch.randn(1, D)
        r_a, r_b = preference_factors(z, flags, mask, z_llm)
        assert torch.allclose(r_b, z_llm)
        assert torch.allclose(r_a, z.mean(dim=1) + z_llm)

    def test_single_event_average(self):
        z = torch.randn(1, 1, D)
        flags = torch.zeros(1, 1, dtype=torch.long)
        mask = torch.ones(1, 1, dtype=torch.bool)
        z_llm = torch.randn(1, D)
        r_a, _ = preference_factors(z, flags, mask, z_llm)
        assert torch.allclose(r_a, z[:, 0] + z_llm)

    def test_duplication_invariance(self):
        z = torch.randn(1, 2, D)
        flags = torch.zeros(1, 2, dtype=torch.long)
        mask = torch.ones(1, 2, dtype=torch.bool)
        r_a1, _ = preference_factors(z, flags, mask, None)
        z_dup = torch.cat([z, z], dim=1)
        flags_dup = torch.zeros(1, 4, dtype=torch.long)
        mask_dup = torch.ones(1, 4, dtype=torch.bool)
        r_a2, _ = preference_factors(z_dup, flags_dup, mask_dup, None)
        assert torch.allclose(r_a1, r_a2, atol=1e-6)

    def test_order_invariance(self):
        torch.manual_seed(1)
        z = torch.randn(1, 4, D)
        flags = torch.tensor([[0, 1, 0, 1]])
        mask = torch.ones(1, 4, dtype=torch.bool)
        r1 = preference_factors(z, flags, mask, None)
        perm = torch.tensor([2, 1, 0, 3])
        r2 = preference_factors(z[:, perm], flags[:, perm], mask, None)
        assert torch.allclose(r1[0], r2[0], atol=1e-6)
        assert torch.allclose(r1[1], r2[1], atol=1e-6)

    def test_behavioral_only_mode(self):
        z = torch.randn(1, 2, D)
        flags = torch.tensor([[0, 1]])
        mask = torch.ones(1, 2, dtype=torch.bool)
        r_a, r_b = preference_factors(z, flags, mask, None)
        assert torch.allclose(r_a, z[:, 0])
        assert torch.allclose(r_b, z[:, 1])


class TestTransferGate:
    def setup_method(self):
        torch.manual_seed(2)
        self.gate = TransferGate(D)

    @given(st.integers(0, 10**6))
    @settings(max_examples=25, deadline=None)
    def test_weights_in_open_interval(self, seed):
        torch.manual_seed(seed)
        args = [torch.randn(4, D) for _ in range(5)]
        w_a, w_b = self.gate(*args)
        for w in (w_a, w_b):
            assert ((w > 0) & (w < 1)).all()

    def test_zero_init_gives_half(self):
        gate = TransferGate(D)
        with torch.no_grad():
            for p in gate.parameters():
                p.zero_()
        w_a, w_b = gate(*[torch.zeros(2, D) for _ in range(5)])
        assert torch.allclose(w_a, torch.full((2,), 0.5))
        assert torch.allclose(w_b, torch.full((2,), 0.5))

    def test_w_a_ignores_u_b(self):
        torch.manual_seed(3)
        u_a, u_m, r_a, r_b = (torch.randn(3, D) for _ in range(4))
        w_a1, _ = self.gate(u_a, torch.randn(3, D), u_m, r_a, r_b)
        w_a2, _ = self.gate(u_a, torch.randn(3, D), u_m, r_a, r_b)
        assert torch.equal(w_a1, w_a2)

    def test_domain_specific_projections(self):
        a_params = {id(p) for p in self.gate.w_t["A"].parameters()}
        b_params = {id(p) for p in self.gate.w_t["B"].parameters()}
        assert not a_params & b_params

    def test_gradients(self):
        torch.manual_seed(4)
        gate = TransferGate(D).double()
        args = [torch.randn(3, D, dtype=torch.float64) for _ in range(5)]

        def loss():
            w_a, w_b = gate(*args)
            return (w_a.sum() - 2.0 * w_b.sum()) ** 2

        err = relative_gradient_error(loss, list(gate.parameters()), n_coords=5)
        assert err < 1e-4
