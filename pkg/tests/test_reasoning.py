import json
import threading
import time
import warnings
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError

from conftest import boxes as box_strategy
from pseudolabel3d.cues import CueRecord, SizePrototypes
from pseudolabel3d.geometry import Box3D, BoxClass
from pseudolabel3d.reasoning import (MAX_BATCH, NoOpReasoner, ReasonerAuthError, ReasonerConfigError,
                                     ReasonerRequest, ReasonerVerdict, RefineConfig, RefineWarning,
                                     RemoteReasoner, ReplayReasoner, RuleBasedReasoner, WireVerdict,
                                     load_template, reason_rule_based, refine, render_prompt)

PROTO = SizePrototypes()


def cue(box, s_cons=0.0, points=100, speed=0.0, dynamic=False, index=0):
    d = float(np.linalg.norm(box.center))
    return CueRecord(0, index, index, box, points, 0.4, speed, d, 1.0, s_cons, 10, 8, box.cls, dynamic)


def verdict(keep, delta=(0, 0, 0), cls="VEHICLE", s=0.5):
    return ReasonerVerdict(keep, s, delta, cls)


class TestRules:
    def test_vehicle_prototype_moving(self):
        b = Box3D(10, 0, 0, 4.7, 1.9, 1.7, cls="VEHICLE")
        (v,) = reason_rule_based(ReasonerRequest(0, [b], [cue(b, points=300, speed=10, dynamic=True)]))
        assert v.keep == 1 and v.cls_new is BoxClass.VEHICLE
        assert v.delta == (0.0, 0.0, 0.0) and v.s_rea >= 0.9

    def test_tiny_sparse_static(self):
        b = Box3D(10, 0, 0, 0.3, 0.3, 0.3)
        (v,) = reason_rule_based(ReasonerRequest(0, [b], [cue(b, points=2)]))
        assert v.keep == 0

    def test_empty(self):
        assert reason_rule_based(ReasonerRequest(0, [], [])) == []

    def test_unaligned_request(self):
        with pytest.raises(ValueError):
            ReasonerRequest(0, [Box3D(0, 0, 0, 1, 1, 1)], [])

    @given(box_strategy, st.integers(0, 500), st.floats(0, 20), st.booleans())
    def test_deterministic_and_valid(self, b, n, speed, dyn):
        req = ReasonerRequest(0, [b], [cue(b, points=n, speed=speed, dynamic=dyn)])
        a, c = RuleBasedReasoner().predict(req), RuleBasedReasoner().predict(req)
        assert a == c
        v = a[0]
        assert 0 <= v.s_rea <= 1 and v.cls_new in (BoxClass.VEHICLE, BoxClass.PEDESTRIAN, BoxClass.CYCLIST)
        assert all(d > 0 for d in np.array(b.dims) + v.delta)

    def test_noop(self):
        b = Box3D(0, 0, 0, 1, 1, 1, cls="CYCLIST")
        (v,) = NoOpReasoner().predict(ReasonerRequest(0, [b], [cue(b)]))
        assert v.keep == 1 and v.delta == (0, 0, 0) and v.cls_new is BoxClass.CYCLIST


class TestVerdict:
    @pytest.mark.parametrize("kw", [dict(keep=2), dict(s_rea=1.7), dict(s_rea=-0.1)])
    def test_invariants(self, kw):
        base = dict(keep=1, s_rea=0.5, delta=(0, 0, 0), cls_new="VEHICLE")
        with pytest.raises(ValueError):
            ReasonerVerdict(**{**base, **kw})

    def test_dict_roundtrip(self):
        v = ReasonerVerdict(1, 0.25, (0.1, -0.2, 0.0), "PEDESTRIAN", "remote")
        assert ReasonerVerdict.from_dict(json.loads(json.dumps(v.to_dict()))) == v

    def test_wire_schema(self):
        w = WireVerdict.model_validate({"box_id": 3, "keep": 1, "score": 0.4, "dl": 0.1, "dw": 0, "dh": 0,
                                        "class": "vehicle"})
        assert w.cls == "VEHICLE"
        for bad in ({"score": 1.7}, {"keep": 2}, {"class": "TRUCK"}, {"dl": float("nan")}):
            with pytest.raises(ValidationError):
                WireVerdict.model_validate({"box_id": 0, "keep": 1, "score": 0.4, "dl": 0, "dw": 0, "dh": 0,
                                            "class": "VEHICLE", **bad})


class TestRefine:
    def box(self):
        return Box3D(3, 4, 0.5, 4.0, 1.8, 1.6, yaw=0.3, cls="VEHICLE", weight=1.0)

    def test_branch_a(self):
        b = self.box()
        res = refine([b], [verdict(1, (0.1, 0.0, -0.05))], [cue(b)])
        (o,) = res.boxes
        assert (o.l, o.w, o.h) == pytest.approx((4.1, 1.8, 1.55), abs=1e-12)
        assert (o.x, o.y, o.z, o.yaw) == (b.x, b.y, b.z, b.yaw)
        assert res.branches == ["A"] and o.weight == b.weight

    def test_branch_a_changes_class(self):
        b = self.box()
        (o,) = refine([b], [verdict(1, cls="CYCLIST")], [cue(b)]).boxes
        assert o.cls is BoxClass.CYCLIST

    def test_branch_b(self):
        b = self.box()
        res = refine([b], [verdict(0)], [cue(b, s_cons=0.9)], RefineConfig(eta=0.7))
        (o,) = res.boxes
        assert (o.l, o.w, o.h) == tuple(PROTO[BoxClass.VEHICLE])
        assert o.weight == 0.5 and res.branches == ["B"]

    def test_branch_c(self):
        b = self.box()
        res = refine([b], [verdict(0)], [cue(b, s_cons=0.2)], RefineConfig(eta=0.7))
        assert res.boxes == [] and res.branches == ["C"]

    def test_eta_is_strict(self):
        b = self.box()
        assert refine([b], [verdict(0)], [cue(b, s_cons=0.7)], RefineConfig(eta=0.7)).branches == ["C"]

    @pytest.mark.parametrize("mode,branch", [("consistency", "B"), ("drop", "C")])
    def test_invalid_correction_demoted(self, mode, branch):
        b = self.box()
        with pytest.warns(RefineWarning):
            res = refine([b], [verdict(1, (-5.0, 0, 0))], [cue(b, s_cons=0.9)],
                         RefineConfig(demote_invalid=mode))
        assert res.branches == [branch] and res.demoted == 1

    def test_zero_delta_idempotent(self):
        b = self.box()
        once = refine([b], [verdict(1)], [cue(b)]).boxes
        twice = refine(once, [verdict(1)], [cue(once[0])]).boxes
        assert once == twice

    def test_unaligned(self):
        with pytest.raises(ValueError):
            refine([self.box()], [], [])

    @given(st.lists(st.tuples(box_strategy, st.integers(0, 1), st.floats(0, 1), st.floats(-3, 3)),
                    max_size=12), st.floats(0, 1))
    def test_totality(self, items, eta):
        bs = [b for b, *_ in items]
        vs = [verdict(k, (d, d, d), cls="PEDESTRIAN") for _, k, _, d in items]
        cs = [cue(b, s_cons=s) for b, _, s, _ in items]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RefineWarning)
            res = refine(bs, vs, cs, RefineConfig(eta=eta))
        assert sum(res.counts.values()) == len(bs) == len(res.branches)
        assert len(res.boxes) == res.counts["A"] + res.counts["B"] <= len(bs)
        for o, br in zip(res.boxes, [x for x in res.branches if x != "C"]):
            assert min(o.l, o.w, o.h) > 0
            if br == "B":
                assert (o.l, o.w, o.h) == tuple(PROTO[o.cls])


class _Server:
    """Loopback endpoint scripted with a list of (status, body, delay) replies."""

    def __init__(self, script):
        self.script = list(script)
        self.bodies = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers["Content-Length"])
                body = json.loads(self.rfile.read(n))
                outer.bodies.append((body, self.headers.get("Authorization")))
                status, reply, delay = outer.script.pop(0) if len(outer.script) > 1 else outer.script[0]
                if callable(reply):
                    reply = reply(body)
                time.sleep(delay)
                data = reply.encode() if isinstance(reply, str) else json.dumps(reply).encode()
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/v1/reason"
        threading.Thread(target=self.httpd.serve_forever, daemon=True).start()

    def close(self):
        self.httpd.shutdown()


def ok_reply(body):
    return {"verdicts": [{"box_id": c["box_id"], "keep": 1, "score": 0.8, "dl": 0.1, "dw": 0.0, "dh": -0.1,
                          "class": "PEDESTRIAN"} for c in body["cue_payload"]]}


@pytest.fixture
def request_three():
    bs = [Box3D(5 + i, 0, 0, 0.8, 0.8, 1.7, cls="PEDESTRIAN") for i in range(3)]
    return ReasonerRequest(4, bs, [cue(b, index=i) for i, b in enumerate(bs)])


@pytest.fixture
def server():
    made = []

    def make(script):
        s = _Server(script)
        made.append(s)
        return s

    yield make
    for s in made:
        s.close()


class TestRemote:
    def test_success_parsed(self, server, request_three):
        srv = server([(200, ok_reply, 0.0)])
        r = RemoteReasoner(srv.url, api_key="k", model="m", backoff=0.0)
        vs = r.predict(request_three)
        assert [v.delta for v in vs] == [(0.1, 0.0, -0.1)] * 3
        assert all(v.provenance == "remote" and v.s_rea == 0.8 for v in vs)
        body, auth = srv.bodies[0]
        assert auth == "Bearer k" and body["model"] == "m"
        assert set(body) >= {"model", "prompt", "cue_payload"}

    def test_out_of_range_score_falls_back(self, server, request_three):
        def reply(body):
            d = ok_reply(body)
            d["verdicts"][1]["score"] = 1.7
            return d
        r = RemoteReasoner(server([(200, reply, 0.0)]).url, backoff=0.0)
        vs = r.predict(request_three)
        assert [v.provenance for v in vs] == ["remote", "fallback", "remote"]
        assert r.stats_["schema_rejections"] == 1 and r.stats_["fallbacks"] == 1

    def test_timeouts_then_success(self, server, request_three):
        srv = server([(200, ok_reply, 0.5), (200, ok_reply, 0.5), (200, ok_reply, 0.0)])
        r = RemoteReasoner(srv.url, timeout=0.2, backoff=0.0, max_retries=3)
        vs = r.predict(request_three)
        assert r.stats_["retries"] == 2
        assert all(v.provenance == "remote" for v in vs)

    def test_server_error_retry(self, server, request_three):
        r = RemoteReasoner(server([(500, "oops", 0.0), (200, ok_reply, 0.0)]).url, backoff=0.0)
        assert all(v.provenance == "remote" for v in r.predict(request_three))
        assert r.stats_["retries"] == 1

    def test_malformed_exhausts_to_fallback(self, server, request_three):
        r = RemoteReasoner(server([(200, "not json", 0.0)]).url, backoff=0.0, max_retries=2)
        vs = r.predict(request_three)
        assert all(v.provenance == "fallback" for v in vs)
        assert r.stats_["requests"] == 3
        rules = RuleBasedReasoner().predict(request_three)
        assert [(v.keep, v.s_rea, v.delta) for v in vs] == [(v.keep, v.s_rea, v.delta) for v in rules]

    def test_unreachable_falls_back(self, request_three):
        r = RemoteReasoner("http://127.0.0.1:9/none", timeout=0.2, backoff=0.0, max_retries=1)
        assert all(v.provenance == "fallback" for v in r.predict(request_three))

    def test_auth_is_fatal(self, server, request_three):
        r = RemoteReasoner(server([(401, "{}", 0.0)]).url, backoff=0.0)
        with pytest.raises(ReasonerAuthError):
            r.predict(request_three)

    def test_no_endpoint(self, request_three):
        with pytest.raises(ReasonerConfigError):
            RemoteReasoner().predict(request_three)

    def test_batches_of_32(self, server):
        bs = [Box3D(5, i, 0, 0.8, 0.8, 1.7, cls="PEDESTRIAN") for i in range(70)]
        req = ReasonerRequest(0, bs, [cue(b, index=i) for i, b in enumerate(bs)])
        srv = server([(200, ok_reply, 0.0)])
        vs = RemoteReasoner(srv.url, backoff=0.0).predict(req)
        assert len(vs) == 70 and all(v.provenance == "remote" for v in vs)
        assert sorted(len(b["cue_payload"]) for b, _ in srv.bodies) == [6, 32, 32]
        assert max(len(b["cue_payload"]) for b, _ in srv.bodies) <= MAX_BATCH

    def test_from_env(self, monkeypatch):
        monkeypatch.delenv("OWL_LLM_ENDPOINT", raising=False)
        with pytest.raises(ReasonerConfigError):
            RemoteReasoner.from_env()
        monkeypatch.setenv("OWL_LLM_ENDPOINT", "http://x")
        monkeypatch.setenv("OWL_LLM_API_KEY", "secret")
        monkeypatch.setenv("OWL_LLM_MODEL", "small")
        r = RemoteReasoner.from_env()
        assert (r.endpoint, r.api_key, r.model) == ("http://x", "secret", "small")


class TestReplay:
    def test_replay_matches_remote(self, server, request_three, tmp_path):
        log = tmp_path / "log.jsonl"
        live = RemoteReasoner(server([(200, ok_reply, 0.0)]).url, backoff=0.0, log_path=str(log)).predict(
            request_three)
        replayed = ReplayReasoner(str(log)).predict(request_three)
        assert [(v.keep, v.s_rea, v.delta, v.cls_new) for v in live] == \
               [(v.keep, v.s_rea, v.delta, v.cls_new) for v in replayed]
        assert all(v.provenance == "replay" for v in replayed)

    def test_miss_falls_back(self, tmp_path, request_three):
        log = tmp_path / "empty.jsonl"
        log.write_text("")
        r = ReplayReasoner(str(log))
        assert all(v.provenance == "fallback" for v in r.predict(request_three))
        assert r.stats_["replay_misses"] == 1

    def test_missing_log(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ReplayReasoner(str(tmp_path / "nope.jsonl")).fit()


def test_prompt_lists_every_box(request_three):
    text = render_prompt(request_three, [0, 1, 2], PROTO)
    assert "VEHICLE" in text and text.count("PEDESTRIAN, 0.80/0.80/1.70") == 3
    assert load_template()
