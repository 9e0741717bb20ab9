import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hirescross.agent_eval import (
    ActionError,
    ActionParseError,
    AitwAction,
    EpisodeStep,
    MatchConfig,
    WebAction,
    aitw_match,
    fixture_path,
    format_action,
    matching_score,
    parse_action,
    read_episodes,
    score_file,
    step_sr,
    step_success,
    write_episodes,
)


class TestWebGrammar:
    def test_click_with_box(self):
        s = '[button] Search → CLICK at the box {"x_left": 0.876, "y_left": 0.308, "width": 0.063, "height": 0.034}'
        a = parse_action(s)
        assert a == WebAction("[button] Search", "CLICK", None, (0.876, 0.308, 0.063, 0.034))
        assert format_action(a) == s

    def test_type_value(self):
        a = parse_action("[textbox] Where from? → TYPE: KATHMANDU")
        assert (a.element_id, a.op, a.value) == ("[textbox] Where from?", "TYPE", "KATHMANDU")

    def test_names_with_punctuation(self):
        a = parse_action("[div] Main St (North), Springfield → CLICK")
        assert a.element_id == "[div] Main St (North), Springfield"

    def test_empty_name_and_ascii_arrow(self):
        assert parse_action("[svg] -> CLICK") == WebAction("[svg]", "CLICK")
        assert format_action(parse_action("[svg] → CLICK")) == "[svg] → CLICK"

    def test_select(self):
        assert parse_action("[combobox] Sort by → SELECT: Price: low to high").value == "Price: low to high"

    @pytest.mark.parametrize("bad,pos", [
        ("garbage", 0),
        ("[button Search → CLICK", None),
        ("[button] Search CLICK", 8),
        ("[button] Search → PRESS", 18),
        ("[button] Search → TYPE", 18),
        ("[button] Search → TYPE:   ", 18),
        ("[button] Search → CLICK: now", 18),
        ('[a] x → CLICK at the box {"x_left": 1}', 25),
        ("[a] x → CLICK at the box {oops", 26),
    ])
    def test_parse_errors_report_position(self, bad, pos):
        with pytest.raises(ActionParseError) as err:
            parse_action(bad)
        if pos is not None:
            assert err.value.pos == pos
        assert "position" in str(err.value)

    names = st.text(st.characters(whitelist_categories=("L", "N", "P", "Zs"), blacklist_characters="[]→:"),
                    max_size=20).map(str.strip).filter(lambda s: "->" not in s and " at the box " not in s)

    @settings(max_examples=200, deadline=None)
    @given(tag=st.sampled_from(["button", "link", "textbox", "div", "span"]), name=names,
           op=st.sampled_from(["CLICK", "TYPE", "SELECT"]),
           value=st.text(st.characters(whitelist_categories=("L", "N")), min_size=1, max_size=10),
           box=st.none() | st.tuples(*[st.floats(0, 1, allow_nan=False)] * 4))
    def test_roundtrip(self, tag, name, op, value, box):
        element = f"[{tag}] {name}" if name else f"[{tag}]"
        a = WebAction(element, op, None if op == "CLICK" else value, box)
        assert parse_action(format_action(a)) == a


class TestStepSuccess:
    def test_examples(self):
        c5, c6 = WebAction("el#5", "CLICK"), WebAction("el#6", "CLICK")
        assert step_success(c5, c5)
        assert not step_success(c5, c6)
        assert step_success(WebAction("x", "TYPE", "KATHMANDU"), WebAction("x", "TYPE", "Kathmandu"))
        assert not step_success(WebAction("x", "TYPE", "KATHMANDU"), WebAction("x", "TYPE", "Kathmandu"),
                                MatchConfig(normalize="exact"))

    def test_op_mismatch_and_empty(self):
        assert not step_success(WebAction("x", "CLICK"), WebAction("x", "TYPE", "a"))
        assert not step_success(None, WebAction("x", "CLICK"))

    @settings(max_examples=100, deadline=None)
    @given(st.sampled_from(["a", "b"]), st.sampled_from(["CLICK", "TYPE"]), st.sampled_from(["Hi", " hi", "yo"]),
           st.sampled_from(["a", "b"]), st.sampled_from(["CLICK", "TYPE"]), st.sampled_from(["Hi", " hi", "yo"]))
    def test_reflexive_symmetric(self, e1, o1, v1, e2, o2, v2):
        a = WebAction(e1, o1, None if o1 == "CLICK" else v1)
        b = WebAction(e2, o2, None if o2 == "CLICK" else v2)
        assert step_success(a, a)
        assert step_success(a, b) == step_success(b, a)

    def test_value_validation(self):
        with pytest.raises(ActionError):
            WebAction("x", "TYPE", "  ")
        with pytest.raises(ActionError):
            WebAction("x", "DRAG")


class TestAitw:
    def test_tap_radius(self):
        a, b = AitwAction("TAP", 0.50, 0.50), AitwAction("TAP", 0.52, 0.51)
        assert math.hypot(0.02, 0.01) == pytest.approx(0.0224, abs=1e-4)
        assert aitw_match(a, b)
        assert not aitw_match(a, AitwAction("TAP", 0.70, 0.60))
        assert aitw_match(a, AitwAction("TAP", 0.70, 0.60), MatchConfig(radius=0.3))

    def test_kinds(self):
        assert not aitw_match(AitwAction("SWIPE", direction="up"), AitwAction("SWIPE", direction="down"))
        assert not aitw_match(AitwAction("TYPE", text="cool!"), AitwAction("TAP", 0.1, 0.1))
        assert aitw_match(AitwAction("TYPE", text=" Cool!"), AitwAction("TYPE", text="cool!"))
        for k in ("HOME", "BACK", "ENTER", "COMPLETE"):
            assert aitw_match(AitwAction(k), AitwAction(k))
        assert not aitw_match(AitwAction("HOME"), AitwAction("BACK"))
        assert not aitw_match(None, AitwAction("HOME"))

    @settings(max_examples=200, deadline=None)
    @given(*[st.floats(0, 1)] * 4)
    def test_tap_reflexive_symmetric(self, x1, y1, x2, y2):
        a, b = AitwAction("TAP", x1, y1), AitwAction("TAP", x2, y2)
        assert aitw_match(a, a)
        assert aitw_match(a, b) == aitw_match(b, a)

    @pytest.mark.parametrize("kw", [
        {"kind": "TAP", "x": 1.2, "y": 0.1}, {"kind": "TAP"}, {"kind": "SWIPE", "direction": "diagonal"},
        {"kind": "SWIPE"}, {"kind": "HOME", "x": 0.1, "y": 0.1}, {"kind": "PINCH"}, {"kind": "TYPE"},
    ])
    def test_validation(self, kw):
        with pytest.raises(ActionError):
            AitwAction(**kw)

    def test_radius_range(self):
        with pytest.raises(ActionError):
            MatchConfig(radius=0.0)
        with pytest.raises(ActionError):
            MatchConfig(radius=1.0)


class TestScores:
    def test_mind2web_fixture(self):
        r = score_file(fixture_path("mind2web"), "mind2web")
        assert (r.correct, r.total, r.rate) == (2, 4, 0.5)
        assert r.by_subset == {"cross_task": (1, 1), "cross_website": (1, 2), "cross_domain": (0, 1)}

    def test_aitw_fixture(self):
        r = score_file(fixture_path("aitw"), "aitw")
        assert (r.correct, r.total, r.rate) == (3, 5, 0.6)
        assert set(r.by_subset) == {"GoogleApps", "Install", "WebShop", "General", "Single"}
        assert score_file(fixture_path("aitw"), "aitw") == r

    def test_all_correct(self):
        steps = [EpisodeStep("t", WebAction(f"e{i}", "CLICK"), WebAction(f"e{i}", "CLICK")) for i in range(3)]
        assert step_sr(steps).rate == 1.0
        aitw = [EpisodeStep("t", AitwAction("BACK"), AitwAction("BACK"))]
        assert matching_score(aitw).rate == 1.0

    def test_failing_step_decreases_rate(self):
        steps = read_episodes(fixture_path("mind2web"), "mind2web")
        before = step_sr(steps).rate
        steps.append(EpisodeStep("t", WebAction("x", "CLICK"), None))
        assert step_sr(steps).rate < before

    def test_empty_set(self):
        with pytest.raises(ActionError):
            step_sr([])

    def test_csv(self):
        lines = score_file(fixture_path("mind2web"), "mind2web").to_csv().splitlines()
        assert lines[0] == "subset,steps,correct,rate"
        assert lines[-1] == "overall,4,2,0.500000"


class TestEpisodeFiles:
    @pytest.mark.parametrize("protocol", ["mind2web", "aitw"])
    def test_roundtrip(self, tmp_path, protocol):
        steps = read_episodes(fixture_path(protocol), protocol)
        write_episodes(steps, tmp_path / "e.jsonl", protocol)
        assert read_episodes(tmp_path / "e.jsonl", protocol) == steps

    def test_unparsable_prediction_is_a_miss(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text('{"task": "t", "gold": "[a] x → CLICK", "pred": "click x", "subset": "s"}\n')
        (st_,) = read_episodes(p, "mind2web")
        assert st_.pred is None
        assert step_sr([st_]).rate == 0.0

    def test_bad_gold_is_an_error(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text('{"task": "t", "gold": "click x", "pred": null}\n')
        with pytest.raises(ActionError, match="e.jsonl:1"):
            read_episodes(p, "mind2web")

    def test_unknown_protocol(self, tmp_path):
        with pytest.raises(ActionError):
            read_episodes(fixture_path("aitw"), "ios")
