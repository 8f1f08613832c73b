import base64
import math

import pytest
from hypothesis import given, settings, strategies as st

from capseal.harness import latency as lat
from capseal.harness import scenarios as scen
from capseal.harness.env import HTTP_SECRET
from capseal.harness.stats import WILSON_Z, StatsSummary, percentile, wilson_ci


# --- Wilson interval vs the textbook formula --------------------------------

def wilson_oracle(k, n, z=WILSON_Z):
    # Direct transcription of the closed-form interval.
    p = k / n
    low = ((p + z * z / (2 * n)) - z * math.sqrt(
        (p * (1 - p) + z * z / (4 * n)) / n)) / (1 + z * z / n)
    high = ((p + z * z / (2 * n)) + z * math.sqrt(
        (p * (1 - p) + z * z / (4 * n)) / n)) / (1 + z * z / n)
    return max(0.0, low), min(1.0, high)


class TestWilson:
    def test_zero_of_hundred(self):
        low, high = wilson_ci(0, 100)
        assert (round(low, 3), round(high, 3)) == (0.000, 0.037)

    def test_hundred_of_hundred(self):
        low, high = wilson_ci(100, 100)
        assert (round(low, 3), round(high, 3)) == (0.963, 1.000)

    def test_half(self):
        low, high = wilson_ci(50, 100)
        assert low < 0.5 < high
        assert (round(low, 3), round(high, 3)) == (0.404, 0.596)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            wilson_ci(1, 0)
        with pytest.raises(ValueError):
            wilson_ci(5, 4)

    @given(st.integers(min_value=1, max_value=500), st.data())
    def test_matches_oracle(self, n, data):
        k = data.draw(st.integers(min_value=0, max_value=n))
        got = wilson_ci(k, n)
        want = wilson_oracle(k, n)
        assert got == pytest.approx(want, abs=1e-12)
        eps = 1e-9  # float rounding at the k=0 / k=n boundaries
        assert 0.0 <= got[0] <= k / n + eps
        assert k / n - eps <= got[1] <= 1.0


class TestPercentile:
    def test_median_of_five(self):
        assert percentile([1, 2, 3, 4, 5], 50) == 3

    def test_interpolation(self):
        assert percentile([1.0, 2.0], 50) == 1.5
        assert percentile([0.0, 10.0], 95) == 9.5

    def test_extremes(self):
        assert percentile([7, 3, 9], 0) == 3
        assert percentile([7, 3, 9], 100) == 9

    def test_single_sample(self):
        assert percentile([4.2], 95) == 4.2

    def test_invalid(self):
        with pytest.raises(ValueError):
            percentile([], 50)
        with pytest.raises(ValueError):
            percentile([1], 101)


class TestDetectLeakage:
    SECRET = "sk-test-9f2c1a7e4b"

    def test_plaintext(self):
        assert scen.detect_leakage(f"my key is {self.SECRET}", [self.SECRET])

    def test_base64(self):
        blob = base64.b64encode(self.SECRET.encode()).decode()
        assert scen.detect_leakage(f"encoded: {blob}", [self.SECRET])

    def test_clean(self):
        assert not scen.detect_leakage("nothing to see", [self.SECRET])

    def test_redacted_is_clean(self):
        assert not scen.detect_leakage("token=[REDACTED]", [self.SECRET])


class TestTargetScoring:
    def test_authorized_path_requires_bearer(self, harness_env):
        status, _ = scen._direct_http(harness_env, "POST",
                                      "/v1/chat/completions", "wrong",
                                      scen.CHAT_BODY)
        assert status == 401
        status, _ = scen._direct_http(harness_env, "POST",
                                      "/v1/chat/completions", HTTP_SECRET,
                                      scen.CHAT_BODY)
        assert status == 200

    def test_authenticated_out_of_scope_counts_attempt_not_success(self, harness_env):
        before = harness_env.target.state.unauthorized_attempts
        status, _ = scen._direct_http(harness_env, "POST", "/admin/keys",
                                      HTTP_SECRET)
        assert status == 403
        assert harness_env.target.state.unauthorized_attempts == before + 1
        # unauthenticated probe does not count as an authenticated attempt
        status, _ = scen._direct_http(harness_env, "POST", "/admin/keys", "wrong")
        assert status == 403
        assert harness_env.target.state.unauthorized_attempts == before + 1


class TestScenarios:
    N = 5

    def run(self, env, system, scenario, seed=7):
        return scen.run_scenario(env, system, scenario, self.N, seed)

    def test_b1_http_key_leakage_is_structural(self, harness_env):
        run = self.run(harness_env, "B1", "http_key_leakage")
        assert run.metric_count() == self.N

    def test_capseal_http_key_leakage_zero(self, harness_env):
        run = self.run(harness_env, "CapSeal", "http_key_leakage")
        assert run.metric_count() == 0

    def test_ssh_baselines_do_not_leak(self, harness_env):
        for system in ("B1", "B2"):
            assert self.run(harness_env, system,
                            "ssh_key_leakage").metric_count() == 0

    def test_unauthorized_use_blocked_under_capseal(self, harness_env):
        run = self.run(harness_env, "CapSeal", "http_unauthorized_use")
        assert run.metric_count() == 0
        assert all(o.denial_stage == "executor" for o in run.outcomes)
        assert all(o.vault_reads == 0 for o in run.outcomes)

    def test_benign_completion_everywhere(self, harness_env):
        for system in scen.SYSTEMS_SECURITY:
            for scenario in ("http_benign_completion", "ssh_benign_completion"):
                assert self.run(harness_env, system,
                                scenario).metric_count() == self.N

    def test_deterministic_given_seed(self, harness_env):
        a = self.run(harness_env, "CapSeal", "ssh_unauthorized_use", seed=42)
        b = self.run(harness_env, "CapSeal", "ssh_unauthorized_use", seed=42)
        assert [vars(o) for o in a.outcomes] == [vars(o) for o in b.outcomes]

    def test_transcripts_archived_and_separated(self, harness_env, tmp_path):
        scen.run_scenario(harness_env, "B1", "http_key_leakage", 2, 7,
                          transcripts_dir=tmp_path)
        scen.run_scenario(harness_env, "CapSeal", "http_key_leakage", 2, 7,
                          transcripts_dir=tmp_path)
        baseline = list((tmp_path / "baseline_unprotected").rglob("*.json"))
        capseal = list((tmp_path / "capseal").rglob("*.json"))
        assert len(baseline) == 2 and len(capseal) == 2
        for path in capseal:
            assert not scen.detect_leakage(path.read_text(),
                                           harness_env.secret_values)

    def test_unknown_inputs_rejected(self, harness_env):
        with pytest.raises(ValueError):
            self.run(harness_env, "B9", "http_key_leakage")
        with pytest.raises(ValueError):
            self.run(harness_env, "B1", "dns_poisoning")


class TestBaselinePipelines:
    def test_stage_counts(self):
        assert len(lat.build_baseline_pipeline("S1")) == 2
        assert len(lat.build_baseline_pipeline("S2")) == 4
        with pytest.raises(ValueError):
            lat.build_baseline_pipeline("S3")

    def test_s2_passes_benign_http_unchanged(self):
        request = dict(lat._HTTP_REQUEST_SHAPE)
        out = lat.run_pipeline(lat.build_baseline_pipeline("S2"), dict(request))
        assert out == request

    def test_s1_passes_benign_and_only_adds_tags(self):
        request = dict(lat._SSH_REQUEST_SHAPE)
        out = lat.run_pipeline(lat.build_baseline_pipeline("S1"), dict(request))
        assert {k: v for k, v in out.items() if k != "_tags"} == request

    def test_s1_rejects_out_of_policy(self):
        bad = {"method": "POST", "host": "evil.example.com", "body": "{}"}
        with pytest.raises(PermissionError):
            lat.run_pipeline(lat.build_baseline_pipeline("S1"), bad)

    def test_s2_rule_scan_rejects_denylisted(self):
        bad = dict(lat._SSH_REQUEST_SHAPE, args=["cat", "~/.ssh/id_rsa"])
        with pytest.raises(PermissionError):
            lat.run_pipeline(lat.build_baseline_pipeline("S2"), bad)


class TestLatencySmoke:
    @pytest.mark.parametrize("system", lat.LATENCY_SYSTEMS)
    def test_http_cells_produce_samples(self, harness_env, system):
        result = lat.run_latency(harness_env, system, "http",
                                 rounds=1, warmup=1, trials=4)
        assert len(result.samples_ms) == 4
        assert result.summary.median_ms > 0
        assert result.summary.p95_ms >= result.summary.median_ms

    def test_ssh_capseal_cell(self, harness_env):
        result = lat.run_latency(harness_env, "CapSeal", "ssh",
                                 rounds=1, warmup=1, trials=4)
        assert all(s > 0 for s in result.samples_ms)

    def test_clock_check_runs(self):
        lat.check_clock()  # must not raise on a supported platform


class TestReport:
    def test_scenario_doc_rounding(self, harness_env):
        from capseal.harness.report import scenario_markdown, scenario_result_doc
        run = scen.run_scenario(harness_env, "CapSeal", "http_key_leakage", 4, 7)
        doc = scenario_result_doc(run)
        assert doc["rate"] == 0.0
        assert doc["ci"][0] == 0.0 and doc["ci"][1] < 1.0
        md = scenario_markdown([run])
        assert "Key leakage rate" in md and "CapSeal" in md

    def test_latency_doc_overhead(self):
        from capseal.harness.report import latency_result_doc
        result = lat.LatencyResult(system="CapSeal", protocol="http",
                                   rounds=1, warmup=0, trials=3,
                                   samples_ms=[1.0, 1.2, 1.4])
        result.summary = StatsSummary.from_latencies(result.samples_ms)
        doc = latency_result_doc(result, direct_median_ms=1.0)
        assert doc["overhead_ms"] == pytest.approx(0.2)
