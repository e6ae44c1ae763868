import itertools
import json
import threading
import time

import httpx
import pytest

from persona_probe import perspective as P
from persona_probe.client import (
    CacheCorruption,
    CacheStore,
    ChatClient,
    ClientError,
    EndpointProfile,
    Method,
    Refusal,
    ScriptedRespondent,
    TokenBucket,
    TransportError,
    UnsupportedError,
    cache_key,
    parse_answer,
    run_with_cache,
)
from persona_probe.questionnaire import load_builtin

PVQ = load_builtin("pvq")
LETTERS = ("A", "B", "C", "D", "E", "F")


def bundle(item=0, perm=range(6), persp=P.NO_PERSPECTIVE, ctx=P.NO_CONTEXT, **meta):
    return P.build_prompt(PVQ, PVQ.items[item], persp, ctx, tuple(perm), meta=meta)


def endpoint(**kw):
    base = dict(id="mock", base_url="http://mock.test/v1", model_name="m", supports_token_scores=True,
                backoff_base=0.5, rate_limit=1e9)
    base.update(kw)
    return EndpointProfile(**base)


def token_reply(scores):
    top = [{"token": k, "logprob": v} for k, v in scores.items()]
    return {"choices": [{"logprobs": {"content": [{"token": "x", "top_logprobs": top}]}}]}


def chat_reply(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


class Upstream:
    """Scripted httpx transport that records requests."""

    def __init__(self, *responses):
        self.responses = list(responses)
        self.requests = []
        self.lock = threading.Lock()

    def __call__(self, request):
        with self.lock:
            self.requests.append(json.loads(request.content))
            item = self.responses.pop(0) if len(self.responses) > 1 else self.responses[0]
        if callable(item):
            item = item(request)
        if isinstance(item, Exception):
            raise item
        if isinstance(item, int):
            return httpx.Response(item, json={"error": "x"})
        return httpx.Response(200, json=item)

    def client(self, ep=None, **kw):
        return ChatClient(ep or endpoint(), httpx.MockTransport(self), **kw)


# -- token scores ----------------------------------------------------------


def test_token_scores_pick_highest():
    up = Upstream(token_reply({"A": -1.2, "B": -0.4, "C": -3.0, "Hello": 0.0}))
    res = up.client().select(bundle())
    assert res.presented_label == "B" and res.method is Method.TOKEN_SCORES
    assert res.original_option_index == 0
    assert not res.tie
    req = up.requests[0]
    assert req["logprobs"] is True and req["max_tokens"] == 1 and req["temperature"] == 0


def test_token_scores_strip_whitespace_and_keep_best():
    up = Upstream(token_reply({" D": -0.3, "D": -2.0, "E": -1.0}))
    assert up.client().select(bundle()).presented_label == "D"


def test_tie_goes_to_earliest_presented_label():
    up = Upstream(token_reply({"E": -0.5, "C": -0.5, "A": -4.0}))
    res = up.client().select(bundle())
    assert res.presented_label == "C" and res.tie


def test_no_valid_token_is_a_refusal_without_generation():
    up = Upstream(token_reply({"I": -0.1, "Sorry": -0.5}))
    with pytest.raises(Refusal) as info:
        up.client(endpoint(supports_generation=False)).select(bundle())
    assert info.value.method is Method.TOKEN_SCORES
    assert b"Sorry" in info.value.raw_payload


def test_refusal_falls_through_to_generation():
    up = Upstream(token_reply({"I": -0.1}), chat_reply("E. Somewhat like me"))
    res = up.client().select(bundle())
    assert res.method is Method.GENERATE_AND_MATCH and res.presented_label == "E"


def test_missing_logprobs_falls_back():
    up = Upstream(chat_reply("x"), chat_reply("The answer is D"))
    res = up.client().select(bundle())
    assert res.method is Method.GENERATE_AND_MATCH and res.presented_label == "D"


# -- continuation ----------------------------------------------------------


def continuation_upstream(logps):
    def reply(request):
        body = json.loads(request.content)
        prompt = body["prompt"]
        label = prompt[-1]
        base = len(prompt) - 2
        return {"choices": [{"logprobs": {"text_offset": [0, 5, base, base + 1],
                                           "token_logprobs": [None, -9.0, -0.01, logps[label]]}}]}
    return Upstream(reply)


def test_continuation_sums_option_tokens():
    logps = dict(zip(LETTERS, (-3.0, -2.0, -0.7, -5.0, -1.0, -4.0)))
    up = continuation_upstream(logps)
    ep = endpoint(supports_token_scores=False, supports_continuation_scores=True)
    res = up.client(ep).select(bundle())
    assert res.method is Method.PER_OPTION_CONTINUATION and res.presented_label == "C"
    assert len(up.requests) == 6
    assert all(r["echo"] and r["max_tokens"] == 0 for r in up.requests)
    assert res.scores["C"] == pytest.approx(-0.71)


# -- generation parsing ----------------------------------------------------


OPTIONS = bundle().meta["option_texts"]
CORPUS = [
    ("B", "B"), ("B.", "B"), ("(C)", "C"), ("**D**", "D"), ("E) Somewhat like me", "E"),
    ("F: A little like me", "F"), ("  A", "A"), ("\"C\"", "C"), ("[D]", "D"), ("`E`", "E"),
    ("The answer is D", "D"), ("My answer: F", "F"), ("I would choose B.", "B"), ("I pick option C", "C"),
    ("Answer: A", "A"), ("Option E fits best.", "E"), ("I select D because it fits.", "D"),
    ("My choice is (B)", "B"), ("answer is f", "F"), ("The correct answer would be C", "C"),
    ("Very much like me", "D"), ("I'd say this is not like me at all.", "B"), ("Somewhat like me, I guess", "E"),
    ("It is a little like me", "F"), ("Not like me.", "A"), ("That is like me.", "C"),
    ("D Very much like me", "D"), ("A because it does not fit", "A"), ("C - like me", "C"),
    ("F\n", "F"), ("E.\nSomewhat like me", "E"), ("*B*", "B"), ("_A_", "A"), ("D)", "D"),
    ("B: Not like me at all", "B"), ("Choice: E", "E"),
    ("I cannot answer that.", None), ("As an AI, I do not have values.", None), ("", None),
    ("Hmm.", None), ("G", None), ("Z.", None), ("I am not sure", None), ("No comment", None),
    ("These do not apply", None), ("Pass", None), ("?", None), ("...", None),
    ("Let me think", None), ("Sorry", None),
]


def test_parser_corpus():
    assert len(CORPUS) == 50
    wrong = [(text, want, parse_answer(text, LETTERS, OPTIONS)) for text, want in CORPUS
             if parse_answer(text, LETTERS, OPTIONS) != want]
    assert wrong == []


def test_generation_refusal_is_raised():
    up = Upstream(chat_reply("As an AI I have no opinions."))
    ep = endpoint(supports_token_scores=False)
    with pytest.raises(Refusal) as info:
        up.client(ep).select(bundle())
    assert info.value.method is Method.GENERATE_AND_MATCH
    assert up.requests[0]["temperature"] == 0


# -- transport behaviour ---------------------------------------------------


def test_retry_with_exponential_backoff():
    slept = []
    up = Upstream(429, 503, token_reply({"A": -0.1}))
    client = up.client(sleep=slept.append)
    assert client.select(bundle()).presented_label == "A"
    assert slept == [0.5, 1.0]
    assert client.requests_sent == 3


def test_retry_budget_exhausted():
    slept = []
    up = Upstream(500)
    with pytest.raises(TransportError, match="4 attempts"):
        up.client(endpoint(supports_generation=False), sleep=slept.append).select(bundle())
    assert slept == [0.5, 1.0, 2.0]
    assert len(up.requests) == 4


def test_network_errors_are_retried():
    up = Upstream(httpx.ConnectError("down"), token_reply({"F": -0.2}))
    assert up.client(sleep=lambda s: None).select(bundle()).presented_label == "F"


def test_client_errors_are_not_retried():
    up = Upstream(400)
    with pytest.raises(ClientError, match="HTTP 400"):
        up.client(sleep=lambda s: None).select(bundle())
    assert len(up.requests) == 1


def test_sink_sees_payload_before_interpretation():
    seen = []
    up = Upstream({"garbage": True})
    client = up.client(endpoint(supports_generation=False), sink=seen.append)
    with pytest.raises(UnsupportedError):
        client.select(bundle())
    assert seen == [b'{"garbage":true}']


def test_system_role_rejected_up_front():
    persp = P.default_perspectives(PVQ)[0]
    up = Upstream(token_reply({"A": 0.0}))
    with pytest.raises(UnsupportedError, match="system role"):
        up.client(endpoint(supports_system_role=False)).select(bundle(persp=persp))
    assert up.requests == []


def test_rate_limiter_spaces_requests():
    now = [0.0]

    def sleep(s):
        now[0] += s

    bucket = TokenBucket(60, capacity=1, clock=lambda: now[0], sleep=sleep)
    waits = [bucket.acquire() for _ in range(4)]
    assert waits[0] == 0.0
    assert waits[1:] == pytest.approx([1.0, 1.0, 1.0])
    assert now[0] == pytest.approx(3.0)


def test_credentials_from_environment(monkeypatch):
    monkeypatch.setenv("PERSONA_PROBE_API_KEY_MY_HOST", "sekret")
    ep = endpoint(id="my-host")
    assert ep.credential_env == "PERSONA_PROBE_API_KEY_MY_HOST"
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json=token_reply({"A": 0.0}))

    ChatClient(ep, httpx.MockTransport(handler)).select(bundle())
    assert seen["auth"] == "Bearer sekret"
    with pytest.raises(ValueError, match="environment"):
        EndpointProfile.from_mapping({"id": "x", "base_url": "u", "model_name": "m", "api_key": "k"})


def test_endpoint_validation():
    with pytest.raises(ValueError):
        endpoint(rate_limit=0)
    with pytest.raises(ValueError, match="unknown"):
        EndpointProfile.from_mapping({"id": "x", "base_url": "u", "model_name": "m", "colour": 1})
    ep = endpoint(supports_token_scores=False, supports_generation=False)
    with pytest.raises(UnsupportedError):
        ChatClient(ep, httpx.MockTransport(Upstream(0))).select(bundle())


# -- cache -----------------------------------------------------------------


def test_cache_cold_then_warm(tmp_path):
    up = Upstream(token_reply({"C": -0.1}))
    store = CacheStore(tmp_path)
    client = up.client()
    cold = run_with_cache(bundle(), client, store)
    warm = run_with_cache(bundle(), client, store)
    assert not cold.cached and warm.cached
    assert warm.presented_label == cold.presented_label == "C"
    assert warm.raw_payload == cold.raw_payload
    assert len(up.requests) == 1


def test_cache_corruption_names_digest(tmp_path):
    store = CacheStore(tmp_path)
    b = bundle()
    digest = cache_key(b, endpoint())
    up = Upstream(token_reply({"C": -0.1}))
    run_with_cache(b, up.client(), store)
    store.path(digest).write_text("{not json", encoding="utf-8")
    with pytest.raises(CacheCorruption, match=digest):
        run_with_cache(b, up.client(), store)


def test_concurrent_callers_share_one_request(tmp_path):
    def slow(request):
        time.sleep(0.05)
        return token_reply({"A": -0.1})

    up = Upstream(slow)
    store = CacheStore(tmp_path)
    client = up.client()
    results = []
    threads = [threading.Thread(target=lambda: results.append(run_with_cache(bundle(), client, store)))
               for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(up.requests) == 1
    assert sum(not r.cached for r in results) == 1


def test_cache_key_sensitivity():
    ep = endpoint()
    perms = P.permute_options(PVQ, 0, 2)
    assert cache_key(bundle(perm=perms[0]), ep) != cache_key(bundle(perm=perms[1]), ep)
    assert cache_key(bundle(), ep) != cache_key(bundle(), endpoint(model_name="other"))
    # Metadata is not part of the request.
    assert cache_key(bundle(task_id="x"), ep) == cache_key(bundle(task_id="y"), ep)


def test_cache_key_no_collisions():
    ep = endpoint()
    # Every answer order of 14 items: 10080 distinct requests.
    keys = {cache_key(bundle(item=i, perm=p), ep) for i in range(14) for p in itertools.permutations(range(6))}
    assert len(keys) == 14 * 720


# -- scripted respondents --------------------------------------------------


def test_scripted_first_maps_through_permutation():
    perm = P.permute_options(PVQ, 3, 1)[0]
    b = bundle(perm=perm)
    res = ScriptedRespondent.first().select(b)
    assert res.presented_label == "A"
    assert res.original_option_index == PVQ.scale.display_order[perm[0]]
    assert res.method is Method.SCRIPTED


def test_scripted_fixed_value_and_target_maximal():
    for perm in P.permute_options(PVQ, 4, 10):
        b = bundle(perm=perm)
        idx = ScriptedRespondent.option(PVQ, 6).select(b).original_option_index
        assert PVQ.scale.numeric_values[idx] == 6
    se = P.default_perspectives(PVQ)[0]
    tm = ScriptedRespondent.target_maximal(PVQ)
    for i, item in enumerate(PVQ.items):
        idx = tm.select(bundle(item=i, persp=se)).original_option_index
        high = item.dimension_id in se.target_ids
        assert PVQ.scale.numeric_values[idx] == (6 if high else 1)


def test_scripted_random_ignores_perspective():
    rnd = ScriptedRespondent.random(7)
    a = rnd.select(bundle(persp=P.default_perspectives(PVQ)[0], permutation=3))
    b = rnd.select(bundle(persp=P.default_perspectives(PVQ)[1], permutation=3))
    assert a.presented_label == b.presented_label


def test_scripted_bad_label_is_refusal():
    with pytest.raises(Refusal):
        ScriptedRespondent(lambda b: "nope").select(bundle())
