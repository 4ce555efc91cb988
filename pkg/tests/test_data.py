import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcdrec.config import SynthConfig
from tcdrec.data import (
    Instance,
    Interaction,
    InteractionLog,
    SplitSpec,
    analyze_intervals,
    bucket_by_interval_variance,
    build_instances,
    build_log,
    build_user_sequences,
    generate_synthetic,
    inject_noise,
    parse_interactions,
    sample_negatives,
    sequences_from_events,
    split_dataset,
    write_interactions,
)
from tcdrec.temporal import DAY

from conftest import make_log


class TestParse:
    def test_three_line_file(self, tmp_path, three_event_log):
        path = tmp_path / "log.jsonl"
        write_interactions(three_event_log, path)
        log = parse_interactions(path)
        assert len(log.events) == 3
        assert log.n_items("A") == 2
        assert log.n_items("B") == 1

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        log = parse_interactions(path)
        assert log.events == []
        assert log.n_items("A") == log.n_items("B") == 0

    def test_unknown_domain_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            json.dumps({"user_id": "u", "item_id": "i", "domain": "A", "timestamp": 1}) + "\n"
            + json.dumps({"user_id": "u", "item_id": "j", "domain": "C", "timestamp": 2}) + "\n"
        )
        with pytest.raises(ValueError, match=":2"):
            parse_interactions(path)

    def test_malformed_line_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"user_id": "u"}\n')
        with pytest.raises(ValueError, match=":1"):
            parse_interactions(path)

    def test_duplicate_event_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            build_log([Interaction("u", "i", "A", 5), Interaction("u", "i", "A", 5)])

    def test_sorted_by_user_then_time(self, tmp_path):
        log = make_log([("u2", "x", "A", 1), ("u1", "y", "B", 9), ("u1", "z", "A", 3)])
        assert [(e.user_id, e.timestamp) for e in log.events] == [
            ("u1", 3), ("u1", 9), ("u2", 1)
        ]


class TestSequences:
    def test_mixed_gaps(self, three_event_log):
        seqs = build_user_sequences(three_event_log, max_len=50)
        assert seqs["u1"].gaps_m == [-1, 10, 15]

    def test_domain_view(self, three_event_log):
        seq = build_user_sequences(three_event_log, max_len=50)["u1"]
        assert seq.seq_a == [(1, 10), (2, 35)]
        assert seq.gaps_a == [-1, 25]

    def test_truncation_keeps_most_recent(self):
        rows = [("u", f"i{k}", "A", 100 + k) for k in range(60)]
        log = make_log(rows)
        seq = build_user_sequences(log, max_len=50)["u"]
        assert len(seq.seq_m) == 50
        assert seq.seq_m[-1][2] == 159
        assert seq.seq_m[0][2] == 110

    def test_short_users_dropped(self):
        log = make_log([("u", "i", "A", 1), ("u", "j", "B", 2), ("v", "k", "A", 3)])
        seqs = build_user_sequences(log, max_len=50)
        assert "u" not in seqs and "v" not in seqs

    def test_merge_consistency(self, three_event_log):
        seq = build_user_sequences(three_event_log, max_len=50)["u1"]
        from_mixed = [(idx, ts) for idx, dom, ts in seq.seq_m if dom == "A"]
        assert from_mixed == seq.seq_a
        assert len(seq.seq_m) == len(seq.seq_a) + len(seq.seq_b)

    def test_shuffle_invariance(self):
        rows = [(f"u{k % 4}", f"i{k}", "AB"[k % 2], 1000 + 37 * k) for k in range(40)]
        log = make_log(rows)
        seqs1 = build_user_sequences(log, max_len=50)
        shuffled = InteractionLog(
            events=list(log.events), item_index=log.item_index, titles=log.titles
        )
        random.Random(3).shuffle(shuffled.events)
        seqs2 = build_user_sequences(shuffled, max_len=50)
        assert seqs1 == seqs2

    @given(st.lists(
        st.tuples(st.integers(0, 3), st.integers(0, 30), st.sampled_from("AB"),
                  st.integers(0, 10**6)),
        min_size=3, max_size=60,
    ))
    @settings(max_examples=40, deadline=None)
    def test_gap_invariants(self, rows):
        events = []
        seen = set()
        for u, i, d, t in rows:
            key = (f"u{u}", f"i{i}", t)
            if key in seen:
                continue
            seen.add(key)
            events.append(Interaction(f"u{u}", f"i{i}", d, t))
        log = build_log(events)
        for seq in build_user_sequences(log, max_len=50).values():
            for gaps in (seq.gaps_a, seq.gaps_b, seq.gaps_m):
                if gaps:
                    assert gaps[0] == -1
                    assert all(g >= 0 for g in gaps[1:])


class TestSplit:
    def _sequences(self, n):
        rows = []
        for k in range(n):
            rows += [(f"u{k:03d}", f"i{j}", "AB"[j % 2], 100 + j) for j in range(5)]
        return build_user_sequences(make_log(rows), max_len=50)

    def test_ten_users(self):
        train, valid, test = split_dataset(self._sequences(10), SplitSpec(seed=0))
        assert (len(train), len(valid), len(test)) == (8, 1, 1)
        assert not (set(train) & set(valid)) and not (set(train) & set(test))

    def test_deterministic(self):
        seqs = self._sequences(20)
        assert split_dataset(seqs, SplitSpec(seed=5)) == split_dataset(seqs, SplitSpec(seed=5))

    def test_seed_changes_partition(self):
        seqs = self._sequences(100)
        assert split_dataset(seqs, SplitSpec(seed=1)) != split_dataset(seqs, SplitSpec(seed=2))

    def test_too_few_users(self):
        with pytest.raises(ValueError):
            split_dataset(self._sequences(2), SplitSpec(seed=0))

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            SplitSpec(train=0.5, valid=0.1, test=0.1)


class TestNegatives:
    def test_full_protocol_size(self):
        negs = sample_negatives(7, 1000, set(), k=999, seed=1)
        assert len(negs) == 999
        assert len(set(negs)) == 999
        assert 7 not in negs

    def test_small_pool(self):
        negs = sample_negatives(3, 10, {1, 2}, k=5, seed=0)
        assert len(set(negs)) == 5
        assert 3 not in negs and not {1, 2} & set(negs)

    def test_deterministic(self):
        assert sample_negatives(1, 500, set(), 100, seed=9) == \
            sample_negatives(1, 500, set(), 100, seed=9)

    def test_insufficient_items_message(self):
        with pytest.raises(ValueError, match="eval_negatives"):
            sample_negatives(1, 10, set(), k=20, seed=0)


class TestSynthetic:
    def test_domain_gap_medians_ordered(self):
        cfg = SynthConfig(users=60, items_a=50, items_b=50, mean_gap_days_a=0.5,
                          mean_gap_days_b=2.0, horizon_days=60, seed=11,
                          seasonal_frac=0.0)
        log = generate_synthetic(cfg)
        assert len(log.events) > 10_000 * 0 and len(log.events) > 1000
        seqs = build_user_sequences(log, max_len=400)
        med = {}
        for attr, key in (("gaps_a", "A"), ("gaps_b", "B")):
            gaps = [g for s in seqs.values() for g in getattr(s, attr)[1:]]
            med[key] = np.median(gaps)
        assert med["A"] < med["B"]

    def test_zero_drift_keeps_top_item(self):
        cfg = SynthConfig(users=1, items_a=40, items_b=40, drift_rate=0.0,
                          seasonal_frac=0.0, session_boost=0.0, horizon_days=90,
                          choice_temp=40.0, seed=3)
        log = generate_synthetic(cfg)
        a_items = [e.item_id for e in log.events if e.domain == "A"]
        assert len(set(a_items)) <= 3  # frozen latent, near-argmax choice

    def test_no_seasonal_concentration_without_seasonality(self):
        from scipy import stats

        cfg = SynthConfig(users=120, items_a=30, items_b=30, seasonal_frac=0.0,
                          drift_rate=0.0, session_boost=0.0, horizon_days=90,
                          mean_gap_days_a=1.0, mean_gap_days_b=1.0, seed=5,
                          choice_temp=1.0)
        log = generate_synthetic(cfg)
        t0 = min(e.timestamp for e in log.events)
        t1 = max(e.timestamp for e in log.events) + 1
        by_item = {}
        for e in log.events:
            if e.domain == "A":
                by_item.setdefault(e.item_id, []).append(e.timestamp)
        top = sorted(by_item.items(), key=lambda kv: -len(kv[1]))[:10]
        failures = 0
        for _, ts in top:
            bins = np.histogram(ts, bins=6, range=(t0, t1))[0]
            p = stats.chisquare(bins).pvalue
            if p < 1e-3:
                failures += 1
        assert failures <= 1

    def test_seasonal_items_concentrate(self):
        cfg = SynthConfig(users=120, items_a=30, items_b=30, seasonal_frac=0.3,
                          drift_rate=0.0, session_boost=0.0, horizon_days=120,
                          seasonal_boost=5.0, mean_gap_days_a=1.0,
                          mean_gap_days_b=1.0, seed=5, choice_temp=1.0)
        log = generate_synthetic(cfg)
        t0 = min(e.timestamp for e in log.events)
        t1 = max(e.timestamp for e in log.events) + 1
        by_item = {}
        for e in log.events:
            if e.domain == "A":
                by_item.setdefault(e.item_id, []).append(e.timestamp)
        # at least one well-interacted item should have most events in a
        # window a third of the horizon wide
        concentrated = 0
        for ts in by_item.values():
            if len(ts) < 20:
                continue
            bins = np.histogram(ts, bins=4, range=(t0, t1))[0]
            if bins.max() / bins.sum() > 0.7:
                concentrated += 1
        assert concentrated >= 1

    def test_deterministic(self):
        cfg = SynthConfig(users=10, items_a=20, items_b=20, horizon_days=30, seed=2)
        assert generate_synthetic(cfg) == generate_synthetic(cfg)

    def test_rejects_nonpositive_counts(self):
        with pytest.raises(ValueError):
            generate_synthetic(SynthConfig(users=0))

    def test_titles_carry_domain_topic_item(self):
        log = generate_synthetic(SynthConfig(users=5, items_a=10, items_b=10,
                                             horizon_days=20, seed=1))
        ev = log.events[0]
        dom, topic, item = ev.title.split("/")
        assert dom == ev.domain and topic.startswith("topic") and item == ev.item_id


class TestNoise:
    def _log(self):
        return generate_synthetic(SynthConfig(users=20, items_a=30, items_b=30,
                                              horizon_days=40, seed=4))

    def test_zero_ratio_identity(self):
        log = self._log()
        users = sorted({e.user_id for e in log.events})
        assert inject_noise(log, users, 0.0, seed=1) is log

    def test_insertion_count(self):
        log = self._log()
        users = sorted({e.user_id for e in log.events})
        total = len(log.events)
        noisy = inject_noise(log, users, 0.1, seed=1)
        assert len(noisy.events) == total + round(0.1 * total)

    def test_deterministic(self):
        log = self._log()
        users = sorted({e.user_id for e in log.events})
        n1 = inject_noise(log, users, 0.2, seed=8)
        n2 = inject_noise(log, users, 0.2, seed=8)
        assert n1 == n2

    def test_only_train_users_touched(self):
        log = self._log()
        users = sorted({e.user_id for e in log.events})
        train, rest = users[:10], users[10:]
        noisy = inject_noise(log, train, 0.2, seed=8)
        before = [e for e in log.events if e.user_id in rest]
        after = [e for e in noisy.events if e.user_id in rest]
        assert before == after

    def test_rejects_bad_ratio(self):
        log = self._log()
        with pytest.raises(ValueError):
            inject_noise(log, [], 1.5, seed=0)


def _instance(user, var_gaps, domain="A"):
    ts = [100]
    for g in var_gaps:
        ts.append(ts[-1] + g)
    events = [Interaction(user, f"i{k}", "A", t) for k, t in enumerate(ts)]
    log = build_log(events)
    seq = sequences_from_events(user, events, log, max_len=50)
    return Instance(user_id=user, target_domain=domain, target_item=1,
                    target_ts=ts[-1] + 1, history=seq)


class TestBuckets:
    def test_nine_sequences_three_buckets(self):
        instances = [_instance(f"u{k}", [10 * k + 1, 1, 2 * k * k]) for k in range(9)]
        assignment = bucket_by_interval_variance(instances, 3)
        counts = [list(assignment.values()).count(b) for b in range(3)]
        assert counts == [3, 3, 3]

    def test_equal_gaps_lowest_bucket(self):
        uniform = _instance("u_uniform", [10, 10, 10])
        spread = [_instance(f"u{k}", [1, 50 * (k + 1), 3]) for k in range(5)]
        assignment = bucket_by_interval_variance([uniform] + spread, 3)
        assert assignment[("u_uniform", "A", uniform.target_ts)] == 0

    def test_variance_ordering(self):
        low = _instance("low", [10, 10])    # var 0
        high = _instance("high", [0, 20])   # var 100
        assignment = bucket_by_interval_variance([low, high], 2)
        assert assignment[("low", "A", low.target_ts)] == 0
        assert assignment[("high", "A", high.target_ts)] == 1

    def test_short_history_forced_to_zero(self):
        short = _instance("s", [5])
        others = [_instance(f"u{k}", [1, 100 * (k + 1)]) for k in range(4)]
        assignment = bucket_by_interval_variance([short] + others, 2)
        assert assignment[("s", "A", short.target_ts)] == 0


class TestIntervals:
    def test_all_hourly(self):
        rows = [("u", f"i{k}", "A", 3600 * k) for k in range(5)]
        rows += [("u", "b1", "B", 10), ("u", "b2", "B", 20)]
        table = analyze_intervals(make_log(rows))
        assert table["A"]["<=1d"] == 1.0

    def test_three_bins(self):
        ts = [0]
        for g in (int(0.5 * DAY), 3 * DAY, 10 * DAY):
            ts.append(ts[-1] + g)
        rows = [("u", f"i{k}", "A", t) for k, t in enumerate(ts)]
        rows += [("u", "b1", "B", 5), ("u", "b2", "B", 6)]
        table = analyze_intervals(make_log(rows))
        assert table["A"]["<=1d"] == pytest.approx(1 / 3)
        assert table["A"]["1d-1w"] == pytest.approx(1 / 3)
        assert table["A"][">1w"] == pytest.approx(1 / 3)

    def test_proportions_sum_to_one(self):
        log = generate_synthetic(SynthConfig(users=20, items_a=20, items_b=20,
                                             horizon_days=50, seed=6))
        table = analyze_intervals(log)
        for domain in table:
            assert sum(table[domain].values()) == pytest.approx(1.0, abs=1e-9)

    def test_sparse_domain_omitted(self):
        rows = [("u", f"i{k}", "A", 100 * k) for k in range(4)] + [("u", "b", "B", 7)]
        table = analyze_intervals(make_log(rows))
        assert "B" not in table

    def test_empty_log_rejected(self):
        with pytest.raises(ValueError):
            analyze_intervals(InteractionLog())


class TestInstances:
    def test_leave_last_out(self, three_event_log):
        more = make_log([
            ("u1", "i1", "A", 10), ("u1", "i2", "B", 20),
            ("u1", "i3", "A", 35), ("u1", "i4", "B", 50),
        ])
        instances = build_instances(more, ["u1"], max_len=50, targets_per_user=1)
        by_domain = {i.target_domain: i for i in instances}
        assert by_domain["A"].target_ts == 35
        assert by_domain["B"].target_ts == 50
        # history strictly precedes the target
        assert all(ts < 35 for _, _, ts in by_domain["A"].history.seq_m)

    def test_all_prefix_targets(self):
        rows = [("u", f"i{k}", "A", 10 * k) for k in range(6)]
        log = make_log(rows)
        instances = build_instances(log, ["u"], max_len=50, targets_per_user=0)
        assert len(instances) == 4  # positions 2..5
