import numpy as np
import pytest
from fastapi.testclient import TestClient

from scorer_service.app import create_app
from scorer_service.backends import decode_f16_b64, encode_f16_b64, stable_pair_softmax
from scorer_service.config import ServiceConfig, load_config
from scorer_service.prompts import PROMPT_TEMPLATES

from svchelpers import png_bytes, structured_photo


def grid_payload(tokens, rows, cols):
    tokens = np.asarray(tokens, dtype=np.float32)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return {
        "rows": rows,
        "cols": cols,
        "positions": np.stack([rr.ravel(), cc.ravel()], axis=1).tolist(),
        "tokens_b64": encode_f16_b64(tokens),
    }


def extract_grid(client, pixels, resolution=None):
    params = {} if resolution is None else {"resolution": resolution}
    resp = client.post(
        "/v1/extract",
        params=params,
        content=png_bytes(pixels),
        headers={"Content-Type": "application/octet-stream"},
    )
    assert resp.status_code == 200, resp.text
    return resp.json()


class TestHealth:
    def test_reports_model_and_dim(self, client):
        resp = client.get("/v1/health")
        assert resp.status_code == 200
        body = resp.json()
        assert body["protocol"] == 1
        assert body["d"] == 3584
        assert body["model"] == "patchstat-v1"

    def test_idempotent(self, client):
        assert client.get("/v1/health").json() == client.get("/v1/health").json()

    def test_503_before_backend_ready(self):
        app = create_app(ServiceConfig())
        # No lifespan: the backend has not been constructed yet.
        bare = TestClient(app)
        assert bare.get("/v1/health").status_code == 503


class TestExtract:
    def test_560x420_token_count(self, client):
        body = extract_grid(client, structured_photo(560, 420, seed=1))
        assert body["m"] == 300
        assert body["d"] == 3584
        assert (body["rows"], body["cols"]) == (15, 20)
        tokens = decode_f16_b64(body["tokens_b64"], body["m"], body["d"])
        assert tokens.shape == (300, 3584)
        assert len(body["positions"]) == 300

    def test_quarter_resolution_quarter_tokens(self, client):
        body = extract_grid(client, structured_photo(560, 420, seed=1), resolution=280)
        assert (body["rows"], body["cols"]) == (8, 10)
        assert body["m"] == 80

    def test_zero_byte_body_is_400(self, client):
        resp = client.post("/v1/extract", content=b"")
        assert resp.status_code == 400

    def test_garbage_body_is_400(self, client):
        resp = client.post("/v1/extract", content=b"definitely not an image")
        assert resp.status_code == 400

    def test_bad_resolution_is_422(self, client):
        resp = client.post(
            "/v1/extract", params={"resolution": 500}, content=png_bytes(structured_photo(56, 56))
        )
        assert resp.status_code == 422

    def test_global_descriptor_is_unit_norm(self, client):
        body = extract_grid(client, structured_photo(112, 84, seed=2))
        g = decode_f16_b64(body["global_b64"], 1, body["global_dim"])[0]
        np.testing.assert_allclose(np.linalg.norm(g.astype(np.float64)), 1.0, atol=1e-3)

    def test_deterministic(self, client):
        a = extract_grid(client, structured_photo(112, 84, seed=3))
        b = extract_grid(client, structured_photo(112, 84, seed=3))
        assert a == b


class TestScore:
    def score(self, client, query, candidates, d=3584, protocol=1, prompt="object"):
        return client.post(
            "/v1/score",
            json={
                "protocol": protocol,
                "d": d,
                "prompt_id": prompt,
                "query": query,
                "candidates": candidates,
            },
        )

    def test_scores_match_own_logits(self, client):
        rng = np.random.default_rng(0)
        query = grid_payload(rng.standard_normal((4, 3584)), 2, 2)
        cands = [grid_payload(rng.standard_normal((4, 3584)), 2, 2) for _ in range(3)]
        resp = self.score(client, query, cands)
        assert resp.status_code == 200
        body = resp.json()
        assert body["protocol"] == 1
        for s, (l0, l1) in zip(body["scores"], body["logits"]):
            assert abs(s - stable_pair_softmax(l1, l0)) <= 1e-6
            assert 0.0 <= s <= 1.0

    def test_protocol_mismatch_is_409(self, client):
        rng = np.random.default_rng(1)
        q = grid_payload(rng.standard_normal((1, 3584)), 1, 1)
        assert self.score(client, q, [q], protocol=2).status_code == 409

    def test_dim_mismatch_is_422(self, client):
        rng = np.random.default_rng(2)
        q = grid_payload(rng.standard_normal((1, 16)), 1, 1)
        assert self.score(client, q, [q], d=16).status_code == 422

    def test_unknown_prompt_is_422(self, client):
        rng = np.random.default_rng(3)
        q = grid_payload(rng.standard_normal((1, 3584)), 1, 1)
        assert self.score(client, q, [q], prompt="haiku").status_code == 422

    def test_bad_token_payload_is_422(self, client):
        q = grid_payload(np.zeros((1, 3584)), 1, 1)
        broken = dict(q)
        broken["tokens_b64"] = q["tokens_b64"][:16]
        assert self.score(client, q, [broken]).status_code == 422

    def test_deterministic(self, client):
        rng = np.random.default_rng(4)
        q = grid_payload(rng.standard_normal((4, 3584)), 2, 2)
        cands = [grid_payload(rng.standard_normal((4, 3584)), 2, 2)]
        first = self.score(client, q, cands).json()
        assert all(self.score(client, q, cands).json() == first for _ in range(3))

    def test_same_image_beats_cross_image(self, client):
        a = extract_grid(client, structured_photo(280, 224, seed=10))
        b = extract_grid(client, structured_photo(280, 224, seed=77))

        def payload(e):
            return {
                "rows": e["rows"],
                "cols": e["cols"],
                "positions": e["positions"],
                "tokens_b64": e["tokens_b64"],
            }

        resp = self.score(client, payload(a), [payload(a), payload(b)])
        scores = resp.json()["scores"]
        assert scores[0] > scores[1]


class TestShuffleAblation:
    def test_shuffle_changes_scores(self):
        for mode in ("query", "both"):
            app = create_app(ServiceConfig(shuffle_positions=mode))
            with TestClient(app) as shuffled:
                rng = np.random.default_rng(5)
                base_app = create_app(ServiceConfig())
                with TestClient(base_app) as plain:
                    q = grid_payload(rng.standard_normal((9, 3584)), 3, 3)
                    c = grid_payload(rng.standard_normal((9, 3584)), 3, 3)
                    body = {
                        "protocol": 1,
                        "d": 3584,
                        "prompt_id": "object",
                        "query": q,
                        "candidates": [c],
                    }
                    on = shuffled.post("/v1/score", json=body).json()["scores"]
                    off = plain.post("/v1/score", json=body).json()["scores"]
                    assert on != off, mode


class TestConfig:
    def test_env_overrides_file(self, tmp_path):
        cfg_file = tmp_path / "svc.cfg"
        cfg_file.write_text("resolution = 280\nshuffle_positions = query\n", encoding="utf-8")
        cfg = load_config(cfg_file, env={"SCORER_RESOLUTION": "560"})
        assert cfg.resolution == 560
        assert cfg.shuffle_positions == "query"

    def test_resolution_must_be_patch_multiple(self):
        with pytest.raises(ValueError):
            ServiceConfig(resolution=550)

    def test_unknown_key_rejected(self, tmp_path):
        cfg_file = tmp_path / "svc.cfg"
        cfg_file.write_text("warp_drive = on\n", encoding="utf-8")
        with pytest.raises(ValueError):
            load_config(cfg_file)

    def test_prompts_demand_single_digit(self):
        for text in PROMPT_TEMPLATES.values():
            assert "Output strictly a single digit" in text
