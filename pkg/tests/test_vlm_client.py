import math
import random

import pytest
import requests

from demian.vlm_client import (
    API_KEY_ENV,
    MOCK_INPUT_TOKENS,
    ClientConfig,
    HttpVlmClient,
    MockOutcome,
    MockVlmClient,
    PermanentClientError,
    TransientClientError,
    VirtualClock,
    VlmClient,
    VlmRequest,
    VlmResponse,
    estimate_output_tokens,
)

REQ = VlmRequest(
    frames=("f0", "f1"),
    system_text="sys",
    user_text="user",
    metadata={"segment_id": "seg#0000", "aspect": "arm_pose"},
)


class FlakyClient(VlmClient):
    """Raises a transient error on the first `fails` attempts, then succeeds."""

    def __init__(self, fails, config, jitter_rng=None):
        super().__init__(config, clock=VirtualClock(), jitter_rng=jitter_rng)
        self._fails = fails
        self.attempts = 0
        self.start_times = []

    def _attempt(self, req):
        self.start_times.append(self.clock.now())
        self.attempts += 1
        if self.attempts <= self._fails:
            raise TransientClientError("scripted transient")
        return VlmResponse("ok", 1, 1, 0.0)


class TestClientConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ClientConfig(max_retries=-1)
        with pytest.raises(ValueError):
            ClientConfig(rate_limit=0)
        with pytest.raises(ValueError):
            ClientConfig(base_backoff=-0.1)
        with pytest.raises(ValueError):
            ClientConfig(timeout=0)

    def test_api_key_from_environment(self, monkeypatch):
        monkeypatch.setenv(API_KEY_ENV, "sk-test-123")
        assert ClientConfig().api_key == "sk-test-123"
        monkeypatch.delenv(API_KEY_ENV)
        assert ClientConfig().api_key is None

    def test_api_key_hidden_from_repr(self, monkeypatch):
        monkeypatch.setenv(API_KEY_ENV, "sk-secret-value")
        assert "sk-secret-value" not in repr(ClientConfig())


class TestVirtualClock:
    def test_sleep_advances_and_logs(self):
        clock = VirtualClock(start=5.0)
        clock.sleep(1.5)
        clock.sleep(0.5)
        assert clock.now() == 7.0
        assert clock.sleeps == [1.5, 0.5]

    def test_negative_sleep_rejected(self):
        with pytest.raises(ValueError):
            VirtualClock().sleep(-0.1)


class TestRetryPolicy:
    def test_fail_twice_succeed_on_third_attempt(self):
        client = FlakyClient(2, ClientConfig(max_retries=3, base_backoff=0.0, rate_limit=1000))
        resp = client.complete(REQ)
        assert resp.raw_text == "ok"
        assert client.attempts == 3

    def test_exhaustion_raises_transient(self):
        client = FlakyClient(10, ClientConfig(max_retries=2, base_backoff=0.0, rate_limit=1000))
        with pytest.raises(TransientClientError):
            client.complete(REQ)
        assert client.attempts == 3  # first attempt + 2 retries

    def test_zero_retries(self):
        client = FlakyClient(1, ClientConfig(max_retries=0, base_backoff=0.0, rate_limit=1000))
        with pytest.raises(TransientClientError):
            client.complete(REQ)
        assert client.attempts == 1

    def test_permanent_error_never_retried(self):
        class Bad(VlmClient):
            attempts = 0

            def _attempt(self, req):
                Bad.attempts += 1
                raise PermanentClientError("HTTP 400")

        client = Bad(ClientConfig(max_retries=5, base_backoff=0.0, rate_limit=1000), clock=VirtualClock())
        with pytest.raises(PermanentClientError):
            client.complete(REQ)
        assert Bad.attempts == 1

    def test_backoff_schedule_doubles_within_jitter_band(self):
        cfg = ClientConfig(max_retries=3, base_backoff=1.0, rate_limit=1000)
        client = FlakyClient(3, cfg, jitter_rng=random.Random(7))
        client.complete(REQ)
        sleeps = client.clock.sleeps
        assert len(sleeps) == 3
        for attempt, delay in enumerate(sleeps):
            nominal = 1.0 * 2**attempt
            assert 0.8 * nominal <= delay <= 1.2 * nominal
        # Exact replay with the same jitter stream.
        rng = random.Random(7)
        expected = [1.0 * 2**a * rng.uniform(0.8, 1.2) for a in range(3)]
        assert sleeps == expected


class TestRateLimiter:
    def test_minimum_start_spacing(self):
        cfg = ClientConfig(max_retries=0, rate_limit=4.0)
        client = FlakyClient(0, cfg)
        for _ in range(8):
            client.complete(REQ)
        starts = client.start_times
        assert len(starts) == 8
        for a, b in zip(starts, starts[1:]):
            assert b - a >= 0.25 - 1e-9

    def test_one_second_window_bound(self):
        for rate in (1.0, 2.5, 4.0, 7.0):
            client = FlakyClient(0, ClientConfig(max_retries=0, rate_limit=rate))
            for _ in range(20):
                client.complete(REQ)
            starts = client.start_times
            for t in starts:
                in_window = sum(1 for s in starts if t <= s < t + 1.0)
                assert in_window <= math.ceil(rate)


class TestMockClient:
    def test_scripted_caption(self):
        script = {("seg#0000", "arm_pose"): MockOutcome(caption="The arm is still.")}
        client = MockVlmClient(script=script)
        resp = client.complete(REQ)
        assert '"caption": "The arm is still."' in resp.raw_text
        assert resp.latency == 0.0
        assert resp.input_tokens == MOCK_INPUT_TOKENS

    def test_unscripted_key_gets_deterministic_caption(self):
        a = MockVlmClient().complete(REQ)
        b = MockVlmClient().complete(REQ)
        assert a.raw_text == b.raw_text
        assert "Deterministic mock caption" in a.raw_text
        other = VlmRequest(
            frames=("f0",),
            system_text="sys",
            user_text="user",
            metadata={"segment_id": "seg#0001", "aspect": "arm_pose"},
        )
        assert MockVlmClient().complete(other).raw_text != a.raw_text

    def test_fail_times_then_success(self):
        script = {("seg#0000", "arm_pose"): MockOutcome(fail_times=2)}
        client = MockVlmClient(
            config=ClientConfig(endpoint_url="mock://", max_retries=3, base_backoff=0.0),
            script=script,
            clock=VirtualClock(),
        )
        resp = client.complete(REQ)
        assert "Deterministic mock caption" in resp.raw_text

    def test_permanent_script(self):
        script = {("seg#0000", "arm_pose"): MockOutcome(error_kind="permanent")}
        with pytest.raises(PermanentClientError):
            MockVlmClient(script=script).complete(REQ)

    def test_token_overrides(self):
        script = {("seg#0000", "arm_pose"): MockOutcome(caption="Hi.", input_tokens=5, output_tokens=2)}
        resp = MockVlmClient(script=script).complete(REQ)
        assert (resp.input_tokens, resp.output_tokens) == (5, 2)

    def test_output_token_estimate(self):
        assert estimate_output_tokens("") == 1
        assert estimate_output_tokens("one two three") == 4
        assert estimate_output_tokens("a b c d e f") == 8


class FakeResponse:
    def __init__(self, status_code=200, body=None, text=""):
        self.status_code = status_code
        self._body = body
        self.text = text

    def json(self):
        if self._body is None:
            raise ValueError("not json")
        return self._body


class FakeSession:
    def __init__(self, outcomes):
        self._outcomes = list(outcomes)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        out = self._outcomes.pop(0)
        if isinstance(out, Exception):
            raise out
        return out


def ok_body(text="hello", prompt_tokens=9, completion_tokens=4):
    return {
        "choices": [{"message": {"content": text}}],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
    }


def http_client(session, **cfg_kw):
    cfg_kw.setdefault("endpoint_url", "http://vlm.local/v1/")
    cfg_kw.setdefault("base_backoff", 0.0)
    cfg = ClientConfig(**cfg_kw)
    return HttpVlmClient(cfg, clock=VirtualClock(), session=session)


class TestHttpClient:
    def test_endpoint_required(self):
        with pytest.raises(ValueError):
            HttpVlmClient(ClientConfig(endpoint_url=""))

    def test_success_parses_body(self, monkeypatch):
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        session = FakeSession([FakeResponse(200, ok_body())])
        resp = http_client(session).complete(REQ)
        assert resp.raw_text == "hello"
        assert (resp.input_tokens, resp.output_tokens) == (9, 4)
        call = session.calls[0]
        assert call["url"] == "http://vlm.local/v1/chat/completions"
        assert "Authorization" not in call["headers"]

    def test_payload_shape(self, monkeypatch):
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        session = FakeSession([FakeResponse(200, ok_body())])
        http_client(session, model_id="m-1").complete(REQ)
        payload = session.calls[0]["json"]
        assert payload["model"] == "m-1"
        assert payload["max_tokens"] == 256
        assert payload["messages"][0] == {"role": "system", "content": "sys"}
        user = payload["messages"][1]
        assert user["role"] == "user"
        assert user["content"][0] == {"type": "text", "text": "user"}
        assert user["content"][1] == {"type": "image_url", "image_url": {"url": "f0"}}
        assert len(user["content"]) == 3

    def test_bearer_header_iff_key_present(self, monkeypatch):
        monkeypatch.setenv(API_KEY_ENV, "sk-abc")
        session = FakeSession([FakeResponse(200, ok_body())])
        http_client(session).complete(REQ)
        assert session.calls[0]["headers"]["Authorization"] == "Bearer sk-abc"

    def test_429_retried_then_succeeds(self, monkeypatch):
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        session = FakeSession([FakeResponse(429), FakeResponse(200, ok_body())])
        resp = http_client(session, max_retries=1, rate_limit=1000).complete(REQ)
        assert resp.raw_text == "hello"
        assert len(session.calls) == 2

    def test_500_is_transient(self, monkeypatch):
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        session = FakeSession([FakeResponse(503)])
        with pytest.raises(TransientClientError):
            http_client(session, max_retries=0).complete(REQ)

    def test_400_is_permanent_single_call(self, monkeypatch):
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        session = FakeSession([FakeResponse(400, text="bad request")])
        with pytest.raises(PermanentClientError):
            http_client(session, max_retries=3).complete(REQ)
        assert len(session.calls) == 1

    def test_timeout_is_transient(self, monkeypatch):
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        session = FakeSession([requests.Timeout("slow")])
        with pytest.raises(TransientClientError):
            http_client(session, max_retries=0).complete(REQ)

    def test_connection_error_is_transient(self, monkeypatch):
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        session = FakeSession([requests.ConnectionError("refused")])
        with pytest.raises(TransientClientError):
            http_client(session, max_retries=0).complete(REQ)

    def test_malformed_body_is_permanent(self, monkeypatch):
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        session = FakeSession([FakeResponse(200, {"choices": []})])
        with pytest.raises(PermanentClientError):
            http_client(session, max_retries=0).complete(REQ)
