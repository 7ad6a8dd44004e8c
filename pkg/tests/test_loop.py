import json
import threading
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from verilab.loop import (
    ClientError,
    EditOp,
    LoopStatus,
    MockEditor,
    OracleVerifier,
    RemoteEditorClient,
    RemoteVerifierClient,
    SemanticAction,
    VerifierAction,
    add_action,
    break_scene,
    delete_action,
    mock_editor,
    move_action,
    oracle_verifier,
    parse_instruction,
    recolor_action,
    replay_history,
    run_loop,
    trained_verifier_adapter,
)
from verilab.policy import ToyPolicy
from verilab.scenes import (
    DEFAULT_COLORS,
    DatasetManifest,
    check_consistency,
    derive_prompt,
    generate_scene,
    is_consistent,
    make_unsatisfiable,
    parse_prompt,
    scene_rng,
)
from verilab.types import BBox, InvalidSample, Judgment, SceneGraph


def manifest(seed=51):
    return DatasetManifest(seed=seed, n_samples=1)


def fresh_scene(index=0, seed=51):
    return generate_scene(scene_rng(seed, index), manifest(seed))


def broken_pair(index, edits=1, seed=51):
    scene = generate_scene(scene_rng(seed, index), manifest(seed))
    while len(scene.objects) < edits + 2:
        index += 1000
        scene = generate_scene(scene_rng(seed, index), manifest(seed))
    prompt = derive_prompt(scene)
    broken = break_scene(scene, scene_rng(seed, 10_000 + index), edits, DEFAULT_COLORS)
    return broken, prompt


# --- actions ------------------------------------------------------------------


def test_semantic_action_instruction_consistency():
    region = BBox(10, 10, 50, 50)
    action = add_action("red", "circle", region)
    assert action.op is EditOp.ADD
    assert parse_instruction(action.instruction).target == region
    with pytest.raises(InvalidSample):
        SemanticAction(EditOp.DELETE, region, action.instruction)
    with pytest.raises(InvalidSample):
        SemanticAction(EditOp.ADD, BBox(0, 0, 5, 5), action.instruction)


def test_verifier_action_invariants():
    region = BBox(0, 0, 10, 10)
    action = add_action("red", "circle", region)
    with pytest.raises(InvalidSample):
        VerifierAction(judgment=Judgment.TRUE, spatial=(region,), semantic=(action,))
    with pytest.raises(InvalidSample):
        VerifierAction(judgment=Judgment.FALSE)
    with pytest.raises(InvalidSample):
        VerifierAction(judgment=Judgment.FALSE, spatial=(BBox(1, 1, 9, 9),), semantic=(action,))
    ok = VerifierAction(judgment=Judgment.FALSE, spatial=(region,), semantic=(action,))
    assert VerifierAction.from_payload(ok.to_payload()) == ok


# --- oracle verifier ------------------------------------------------------------


def test_oracle_on_consistent_scene():
    scene = fresh_scene(0)
    action = oracle_verifier(scene, derive_prompt(scene))
    assert action.judgment is Judgment.TRUE
    assert action.spatial == ()


def test_oracle_fixes_invert_each_perturbation():
    for index in range(20):
        scene, prompt = broken_pair(index, edits=1)
        action = oracle_verifier(scene, prompt)
        assert action.judgment is Judgment.FALSE
        fixed = mock_editor(scene, action.semantic, fidelity=1.0)
        assert is_consistent(fixed, prompt)


# --- mock editor ------------------------------------------------------------------


def test_mock_editor_perfect_add():
    scene = fresh_scene(1)
    region = BBox(0, 0, 31, 31)
    edited = mock_editor(scene, [add_action("red", "circle", region)], fidelity=1.0)
    assert any(o.region == region and o.color == "red" for o in edited.objects)


def test_mock_editor_delete_and_recolor_and_move():
    scene = fresh_scene(2)
    target = scene.objects[0]
    deleted = mock_editor(
        scene, [delete_action(target.color, target.category, target.region)], fidelity=1.0
    )
    assert all(o.id != target.id for o in deleted.objects)

    recolored = mock_editor(scene, [recolor_action(target.category, target.region, "plaid")], fidelity=1.0)
    assert recolored.object_by_id(target.id).color == "plaid"

    destination = BBox(0, 0, 40, 40)
    moved = mock_editor(
        scene,
        [move_action(target.color, target.category, target.region, destination)],
        fidelity=1.0,
    )
    assert moved.object_by_id(target.id).region == destination


def test_mock_editor_zero_fidelity_never_lands():
    scene = fresh_scene(3)
    region = BBox(3, 3, 37, 41)
    rng = np.random.default_rng(9)
    for _ in range(50):
        edited = mock_editor(scene, [add_action("red", "circle", region)], fidelity=0.0, rng=rng)
        assert not any(o.region == region for o in edited.objects)


def test_mock_editor_fidelity_binomial_rate():
    scene = fresh_scene(4)
    region = BBox(5, 5, 42, 47)  # size distinct from the misfire region shape
    action = add_action("red", "circle", region)
    rng = np.random.default_rng(123)
    landed = sum(
        1
        for _ in range(1000)
        if any(o.region == region for o in mock_editor(scene, [action], 0.5, rng).objects)
    )
    assert abs(landed / 1000 - 0.5) < 0.03


def test_mock_editor_requires_rng_below_one():
    with pytest.raises(ValueError):
        mock_editor(fresh_scene(5), [], fidelity=0.5)


# --- run_loop ----------------------------------------------------------------------


def test_presatisfied_scene_accepted_at_step_zero():
    scene = fresh_scene(6)
    state = run_loop(scene, derive_prompt(scene), OracleVerifier(), MockEditor())
    assert state.status is LoopStatus.ACCEPTED
    assert state.step == 0
    assert len(state.history) == 1
    assert state.history[0].scene_after is None


def test_two_error_scene_accepted_within_three_verifies():
    scene, prompt = broken_pair(7, edits=2)
    state = run_loop(scene, prompt, OracleVerifier(), MockEditor())
    assert state.status is LoopStatus.ACCEPTED
    # step counts edit rounds; verify calls = step + 1 <= 3
    assert state.step + 1 <= 3
    assert is_consistent(state.scene, prompt)


def test_unsatisfiable_prompt_exhausts_at_ten():
    scene, prompt = make_unsatisfiable(fresh_scene(8))
    state = run_loop(scene, prompt, OracleVerifier(), MockEditor(), max_steps=10)
    assert state.status is LoopStatus.EXHAUSTED
    assert state.step == 10
    assert len(state.history) == 10


def test_violations_strictly_decrease_with_oracle_and_perfect_editor():
    scene, prompt = broken_pair(9, edits=3)
    clauses = parse_prompt(prompt)
    counts = [len(check_consistency(scene, clauses))]

    def observer(state):
        if state.status is LoopStatus.RUNNING:
            counts.append(len(check_consistency(state.scene, clauses)))

    state = run_loop(scene, prompt, OracleVerifier(), MockEditor(), observer=observer)
    assert state.status is LoopStatus.ACCEPTED
    assert all(b < a for a, b in zip(counts, counts[1:]))
    assert counts[-1] == 0


def test_history_replay_reproduces_final_scene():
    for index in range(10):
        scene, prompt = broken_pair(20 + index, edits=2)
        state = run_loop(scene, prompt, OracleVerifier(), MockEditor())
        assert replay_history(scene, state.history) == state.scene


def test_client_error_preserves_partial_history():
    class FlakyEditor:
        def __init__(self):
            self.calls = 0

        def edit(self, scene, actions):
            self.calls += 1
            if self.calls > 1:
                raise RuntimeError("backend fell over")
            return mock_editor(scene, actions, fidelity=1.0)

    scene, prompt = broken_pair(35, edits=3)
    flaky = FlakyEditor()
    forever = replace(oracle_verifier(scene, prompt))  # make sure scene is actually broken
    assert forever.judgment is Judgment.FALSE

    class OneFixVerifier:
        """Always reports one (possibly stale) violation so the editor is hit twice."""

        def act(self, scene_, prompt_):
            action = oracle_verifier(scene_, prompt_)
            if action.judgment is Judgment.TRUE:
                region = scene_.objects[0].region
                obj = scene_.objects[0]
                return VerifierAction(
                    judgment=Judgment.FALSE,
                    spatial=(region,),
                    semantic=(delete_action(obj.color, obj.category, region),),
                )
            return VerifierAction(
                judgment=Judgment.FALSE,
                spatial=action.spatial[:1],
                semantic=action.semantic[:1],
            )

    with pytest.raises(ClientError) as err:
        run_loop(scene, prompt, OneFixVerifier(), flaky)
    assert err.value.state is not None
    assert len(err.value.state.history) == 1
    assert err.value.state.status is LoopStatus.RUNNING


# --- trained adapter ------------------------------------------------------------------


def test_adapter_true_judgment_emits_no_actions():
    scene = fresh_scene(10)
    adapter = trained_verifier_adapter(ToyPolicy.oracle(scale=50.0))
    action = adapter.act(scene, derive_prompt(scene))
    assert action.judgment is Judgment.TRUE
    assert action.spatial == () and action.semantic == ()


def test_adapter_matches_oracle_on_single_error_scenes():
    adapter = trained_verifier_adapter(ToyPolicy.oracle(scale=50.0))
    compared = 0
    for index in range(15):
        scene, prompt = broken_pair(40 + index, edits=1)
        oracle_action = oracle_verifier(scene, prompt)
        if len(oracle_action.spatial) != 1:
            continue  # a single edit can produce several violations; skip those
        compared += 1
        state_a = run_loop(scene, prompt, adapter, MockEditor())
        state_b = run_loop(scene, prompt, OracleVerifier(), MockEditor())
        assert state_a == state_b
    assert compared >= 5


def test_adapter_reaches_oracle_outcomes_on_multi_error_scenes():
    adapter = trained_verifier_adapter(ToyPolicy.oracle(scale=50.0))
    for index in range(10):
        scene, prompt = broken_pair(60 + index, edits=2)
        state = run_loop(scene, prompt, adapter, MockEditor())
        assert state.status is LoopStatus.ACCEPTED
        assert is_consistent(state.scene, prompt)


def test_untrained_grounding_exhausts_more_than_oracle():
    half_trained = ToyPolicy(
        ToyPolicy.oracle(scale=50.0).judgment_weights,
        np.array([-0.2, 0.0, 0.0, 0.0]),
    )
    adapter = trained_verifier_adapter(half_trained)
    exhausted_adapter = 0
    exhausted_oracle = 0
    for index in range(30):
        scene, prompt = broken_pair(80 + index, edits=1)
        if run_loop(scene, prompt, adapter, MockEditor()).status is LoopStatus.EXHAUSTED:
            exhausted_adapter += 1
        if run_loop(scene, prompt, OracleVerifier(), MockEditor()).status is LoopStatus.EXHAUSTED:
            exhausted_oracle += 1
    assert exhausted_oracle == 0
    assert exhausted_adapter > exhausted_oracle


# --- remote clients -------------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        if self.path == "/verify":
            scene = SceneGraph.from_payload(body["scene"])
            payload = oracle_verifier(scene, body["prompt"]).to_payload()
            self._reply(200, payload)
        elif self.path == "/edit":
            scene = SceneGraph.from_payload(body["scene"])
            actions = [SemanticAction.from_payload(a) for a in body["actions"]]
            self._reply(200, mock_editor(scene, actions, fidelity=1.0).to_payload())
        elif self.path == "/broken-schema":
            self._reply(200, {"judgment": "Maybe", "spatial": [], "semantic": []})
        elif self.path == "/not-json":
            self.send_response(200)
            self.send_header("Content-Type", "text/plain")
            self.end_headers()
            self.wfile.write(b"plain text")
        else:
            self._reply(500, {"error": "boom"})

    def _reply(self, code, payload):
        data = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture(scope="module")
def server():
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{httpd.server_address[1]}"
    httpd.shutdown()


def test_remote_loop_end_to_end(server):
    scene, prompt = broken_pair(120, edits=1)
    verifier = RemoteVerifierClient(f"{server}/verify")
    editor = RemoteEditorClient(f"{server}/edit", prompt=prompt)
    state = run_loop(scene, prompt, verifier, editor)
    assert state.status is LoopStatus.ACCEPTED
    assert is_consistent(state.scene, prompt)
    local = run_loop(scene, prompt, OracleVerifier(), MockEditor())
    assert state == local


def test_remote_verifier_schema_violation(server):
    scene = fresh_scene(12)
    client = RemoteVerifierClient(f"{server}/broken-schema")
    with pytest.raises(ClientError):
        client.act(scene, derive_prompt(scene))


def test_remote_non_2xx_and_non_json(server):
    scene = fresh_scene(13)
    with pytest.raises(ClientError):
        RemoteVerifierClient(f"{server}/oops").act(scene, derive_prompt(scene))
    with pytest.raises(ClientError):
        RemoteVerifierClient(f"{server}/not-json").act(scene, derive_prompt(scene))


def test_remote_unreachable_raises_client_error():
    scene = fresh_scene(14)
    client = RemoteVerifierClient("http://127.0.0.1:9/verify", timeout=0.2, retries=1)
    with pytest.raises(ClientError):
        client.act(scene, derive_prompt(scene))


def test_remote_failure_propagates_through_loop(server):
    scene, prompt = broken_pair(130, edits=1)
    verifier = RemoteVerifierClient(f"{server}/verify")
    editor = RemoteEditorClient(f"{server}/oops", prompt=prompt)
    with pytest.raises(ClientError) as err:
        run_loop(scene, prompt, verifier, editor)
    assert err.value.state is not None


# --- fixtures helper ----------------------------------------------------------------


def test_break_scene_produces_bounded_violations():
    produced = 0
    for index in range(30):
        scene = fresh_scene(index, seed=77)
        if len(scene.objects) < 4:
            continue
        broken = break_scene(scene, scene_rng(77, 500 + index), 2, DEFAULT_COLORS)
        violations = check_consistency(broken, parse_prompt(derive_prompt(scene)))
        assert violations
        produced += 1
    assert produced >= 15
