import inspect

import numpy as np
import pytest

from graybox import ops
from graybox.tensor import Tensor
from graybox.vault import (
    SEALED_SURFACE, TEXT_EMBEDDINGS, TEXT_FEATURE, TEXT_TOKEN_IDS, VISION_FEATURE, VISION_PIXELS,
    AccessError, EntryError, EntryShapeError, Modality, SessionStateError, Vault, VaultConfig, VaultInputError,
    build_vault, encode_image, encode_text, load_vault, prefix_entry_id,
)


@pytest.fixture(scope="module")
def vault():
    return build_vault(42)


def _pixels(rng, b=2, dtype=np.float32):
    return rng.normal(0.5, 0.25, (b, 3, 32, 32)).astype(dtype)


def _ids(rng, b=2, L=6):
    return rng.integers(2, 64, (b, L))


def _run(vault, entries, seeds=None, text_free=0):
    s = vault.open_session()
    out = vault.forward(s, entries, text_free)
    grads = vault.backward(s, seeds if seeds is not None else {k: np.ones(v.dims, v.dtype) for k, v in out.items()})
    return out, grads


class TestBuild:
    def test_same_seed_same_checksum(self):
        assert build_vault(42).checksum == build_vault(42).checksum

    def test_different_seed_different_checksum(self):
        assert build_vault(42).checksum != build_vault(43).checksum

    def test_parameter_count_matches_hand_count(self, vault):
        w, m, L = 64, 256, 4
        block = 2 * w + (w * 3 * w + 3 * w) + (w * w + w) + 2 * w + (w * m + m) + (m * w + w)
        vision = (3 * 4 * 4) * w + w + w + (64 + 1) * w + L * block + 2 * w + w * 64
        text = 64 * w + 17 * w + L * block + 2 * w + w * 64
        assert vault.parameter_count() == vision + text + 1 == 420865

    def test_init_statistics(self):
        p = build_vault(0).owner_unlock(0).parameters()
        assert np.all(p["vision.blocks.0.ln1_g"] == 1) and np.all(p["text.blocks.3.fc2_b"] == 0)
        assert abs(p["vision.blocks.0.qkv_w"].std() - 0.02) < 2e-3
        assert p["temperature"][0] == np.float32(1 / 0.07)

    def test_checksum_is_fnv_over_canonical_bytes(self, vault):
        # independent byte-at-a-time FNV-1a over the concatenated little-endian parameter bytes
        params = vault.owner_unlock(42).parameters()
        blob = b"".join(np.ascontiguousarray(params[n], "<f4").tobytes() for n in vault.owner_unlock(42).names())
        h = 0xCBF29CE484222325
        for byte in blob[:4096]:
            h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        from graybox import kernels

        assert kernels.fnv1a64(np.frombuffer(blob[:4096], np.uint8)) == h
        assert kernels.fnv1a64(np.frombuffer(blob, np.uint8)) == vault.checksum


class TestEntries:
    def test_descriptor_order_and_count(self, vault):
        d = vault.list_entries()
        assert len(d) == 11
        assert [x.name for x in d[:3]] == ["vision-pixels", "text-token-ids", "text-embeddings"]
        assert [(x.encoder, x.layer) for x in d[3:]] == [("vision", i) for i in range(4)] + [("text", i) for i in range(4)]
        assert all(x.modality is Modality.LAYER_PREFIX for x in d[3:])
        assert [x.id for x in d] == list(range(11))

    def test_grad_flags(self, vault):
        assert [x.grad_available for x in vault.list_entries()] == [True, False] + [True] * 9

    def test_vision_shape(self, vault):
        assert vault.list_entries()[0].shape == (3, 32, 32)

    def test_prefix_ids(self):
        assert prefix_entry_id("vision", 0) == 3 and prefix_entry_id("text", 3) == 10


class TestEmbed:
    def test_repeated_ids_give_equal_rows(self, vault):
        e = vault.embed_tokens([5, 5]).numpy()
        assert e.shape == (2, 64) and np.array_equal(e[0], e[1])

    def test_rows_equal_table(self, vault):
        tok = vault.owner_unlock(42).parameters()["text.tok"]
        assert np.array_equal(vault.embed_tokens([3, 9, 63]).numpy(), tok[[3, 9, 63]])

    @pytest.mark.parametrize("bad", [[], [64], [-1], [1.5]])
    def test_bad_ids_rejected(self, vault, bad):
        with pytest.raises(VaultInputError):
            vault.embed_tokens(np.array(bad))

    def test_too_long(self, vault):
        with pytest.raises(EntryShapeError):
            vault.embed_tokens(np.ones(17, int))


class TestForward:
    def test_zero_shot_equivalence(self, vault, rng):
        """Sealed forward with no prefixes equals the reference encoders bit-exactly."""
        x, ids = _pixels(rng), _ids(rng)
        s = vault.open_session()
        out = vault.forward(s, {VISION_PIXELS: x, TEXT_TOKEN_IDS: ids.astype(np.float32)})
        vault.close_session(s)
        p = {k: Tensor(v) for k, v in vault.owner_unlock(42).parameters().items()}
        cfg = VaultConfig()
        ref_img = encode_image(p, Tensor(x), cfg)
        ref_txt = encode_text(p, ops.embedding_lookup(p["text.tok"], ids), cfg)
        assert np.array_equal(out[VISION_FEATURE].numpy(), ref_img.numpy())
        assert np.array_equal(out[TEXT_FEATURE].numpy(), ref_txt.numpy())

    def test_ids_and_embeddings_paths_agree(self, vault, rng):
        ids = _ids(rng)
        a, _ = _run(vault, {TEXT_TOKEN_IDS: ids.astype(np.float32)}, seeds={})
        b, _ = _run(vault, {TEXT_EMBEDDINGS: vault.embed_tokens(ids)}, seeds={})
        assert np.array_equal(a[TEXT_FEATURE].numpy(), b[TEXT_FEATURE].numpy())

    def test_deterministic(self, vault, rng):
        x = _pixels(rng)
        a, _ = _run(vault, {VISION_PIXELS: x}, seeds={})
        b, _ = _run(vault, {VISION_PIXELS: x}, seeds={})
        assert np.array_equal(a[VISION_FEATURE].numpy(), b[VISION_FEATURE].numpy())

    def test_features_unit_norm(self, vault, rng):
        out, _ = _run(vault, {VISION_PIXELS: _pixels(rng), TEXT_TOKEN_IDS: _ids(rng).astype(np.float32)}, seeds={})
        for f in out.values():
            np.testing.assert_allclose(np.linalg.norm(f.numpy(), axis=-1), 1.0, rtol=1e-5)

    def test_zero_prefix_changes_vision_feature(self, vault, rng):
        x = _pixels(rng)
        a, _ = _run(vault, {VISION_PIXELS: x}, seeds={})
        b, _ = _run(vault, {VISION_PIXELS: x, prefix_entry_id("vision", 0): np.zeros((2, 64), np.float32)}, seeds={})
        assert not np.array_equal(a[VISION_FEATURE].numpy(), b[VISION_FEATURE].numpy())

    def test_text_prefix_leaves_vision_unchanged(self, vault, rng):
        x, ids = _pixels(rng), _ids(rng).astype(np.float32)
        a, _ = _run(vault, {VISION_PIXELS: x, TEXT_TOKEN_IDS: ids}, seeds={})
        prefix = rng.normal(size=(3, 64)).astype(np.float32)
        b, _ = _run(vault, {VISION_PIXELS: x, TEXT_TOKEN_IDS: ids, prefix_entry_id("text", 2): prefix}, seeds={})
        assert np.array_equal(a[VISION_FEATURE].numpy(), b[VISION_FEATURE].numpy())
        assert not np.array_equal(a[TEXT_FEATURE].numpy(), b[TEXT_FEATURE].numpy())

    def test_single_item_unbatched(self, vault, rng):
        x = _pixels(rng, 1)
        a, _ = _run(vault, {VISION_PIXELS: x[0]}, seeds={})
        b, _ = _run(vault, {VISION_PIXELS: x}, seeds={})
        assert np.array_equal(a[VISION_FEATURE].numpy(), b[VISION_FEATURE].numpy())

    @pytest.mark.parametrize(
        "entries, err",
        [
            ({99: np.zeros((3, 32, 32), np.float32)}, EntryError),
            ({VISION_PIXELS: np.zeros((3, 16, 16), np.float32)}, EntryShapeError),
            ({TEXT_EMBEDDINGS: np.zeros((17, 64), np.float32)}, EntryShapeError),
            ({TEXT_EMBEDDINGS: np.zeros((4, 32), np.float32)}, EntryShapeError),
            ({prefix_entry_id("vision", 1): np.zeros((1, 64), np.float32)}, EntryError),
            ({VISION_PIXELS: np.zeros((3, 32, 32), np.float32), prefix_entry_id("vision", 1): np.zeros((65, 64), np.float32)}, EntryShapeError),
            ({VISION_PIXELS: np.zeros((3, 32, 32), np.float32), prefix_entry_id("text", 1): np.zeros((1, 64), np.float32)}, EntryError),
            ({TEXT_TOKEN_IDS: np.ones(4, np.float32), TEXT_EMBEDDINGS: np.zeros((4, 64), np.float32)}, EntryError),
            ({VISION_PIXELS: np.zeros((3, 32, 32), np.float32), TEXT_EMBEDDINGS: np.zeros((4, 64))}, EntryShapeError),
        ],
    )
    def test_invalid_entries(self, vault, entries, err):
        s = vault.open_session()
        with pytest.raises(err):
            vault.forward(s, entries)
        vault.close_session(s)

    def test_forward_needs_open_session(self, vault, rng):
        s = vault.open_session()
        vault.close_session(s)
        with pytest.raises(SessionStateError):
            vault.forward(s, {VISION_PIXELS: _pixels(rng)})


class TestBackward:
    def test_zero_seed_gives_zero_grads(self, vault, rng):
        entries = {VISION_PIXELS: _pixels(rng), TEXT_EMBEDDINGS: vault.embed_tokens(_ids(rng)),
                   prefix_entry_id("vision", 2): rng.normal(size=(2, 64)).astype(np.float32)}
        s = vault.open_session()
        out = vault.forward(s, entries)
        grads = vault.backward(s, {k: np.zeros(v.dims, np.float32) for k, v in out.items()})
        assert set(grads) == set(entries)
        for g in grads.values():
            assert not g.numpy().any()

    def test_grad_dims_match_entries(self, vault, rng):
        entries = {VISION_PIXELS: _pixels(rng, 3), TEXT_TOKEN_IDS: _ids(rng, 3).astype(np.float32)}
        for layer in range(4):
            entries[prefix_entry_id("vision", layer)] = rng.normal(size=(layer + 1, 64)).astype(np.float32)
            entries[prefix_entry_id("text", layer)] = rng.normal(size=(2, 64)).astype(np.float32)
        _, grads = _run(vault, entries)
        assert set(grads) == set(entries) - {TEXT_TOKEN_IDS}
        for k, g in grads.items():
            assert g.dims == np.shape(entries[k])

    def test_double_backward(self, vault, rng):
        s = vault.open_session()
        out = vault.forward(s, {VISION_PIXELS: _pixels(rng)})
        seeds = {k: np.ones(v.dims, np.float32) for k, v in out.items()}
        vault.backward(s, seeds)
        with pytest.raises(SessionStateError):
            vault.backward(s, seeds)

    def test_grad_for_missing_output(self, vault, rng):
        s = vault.open_session()
        vault.forward(s, {VISION_PIXELS: _pixels(rng)})
        with pytest.raises(VaultInputError):
            vault.backward(s, {TEXT_FEATURE: np.ones((2, 64), np.float32)})
        vault.close_session(s)

    def test_grad_dims_checked(self, vault, rng):
        s = vault.open_session()
        vault.forward(s, {VISION_PIXELS: _pixels(rng)})
        with pytest.raises(EntryShapeError):
            vault.backward(s, {VISION_FEATURE: np.ones((3, 64), np.float32)})
        vault.close_session(s)

    @pytest.mark.parametrize("dtype, rtol", [(np.float64, 1e-6), (np.float32, 1e-4)])
    def test_entry_grads_match_finite_differences(self, vault, rng, dtype, rtol):
        """Central differences on the largest gradient coordinates of every entry kind.

        The difference quotient is always evaluated in float64 (float32 forward
        rounding alone would swamp a 1e-4 comparison); inputs are float32-representable
        so both dtypes see the same point.
        """
        pv = prefix_entry_id("vision", 1)
        f32 = lambda a: np.asarray(a, np.float32).astype(np.float64)  # noqa: E731
        arrays = [f32(_pixels(rng, 1)), f32(vault.embed_tokens(_ids(rng, 1, 5)).numpy()),
                  f32(rng.normal(size=(2, 64)) * 0.5)]
        wv, wt = f32(rng.normal(size=(1, 64))), f32(rng.normal(size=(1, 64)))

        def loss64(xx, ee, pp):
            s = vault.open_session()
            out = vault.forward(s, {VISION_PIXELS: xx, TEXT_EMBEDDINGS: ee, pv: pp})
            vault.close_session(s)
            return float((out[VISION_FEATURE].numpy() * wv).sum() + (out[TEXT_FEATURE].numpy() * wt).sum())

        s = vault.open_session()
        vault.forward(s, {VISION_PIXELS: arrays[0].astype(dtype), TEXT_EMBEDDINGS: arrays[1].astype(dtype),
                          pv: arrays[2].astype(dtype)})
        grads = vault.backward(s, {VISION_FEATURE: wv.astype(dtype), TEXT_FEATURE: wt.astype(dtype)})
        h = 1e-5
        for which, eid in enumerate([VISION_PIXELS, TEXT_EMBEDDINGS, pv]):
            g = grads[eid].numpy()
            assert g.dtype == dtype
            for flat in np.argsort(-np.abs(g).ravel())[:3]:
                idx = np.unravel_index(flat, g.shape)
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[which][idx] += h
                minus[which][idx] -= h
                fd = (loss64(*plus) - loss64(*minus)) / (2 * h)
                np.testing.assert_allclose(g[idx], fd, rtol=rtol, atol=1e-9)

    def test_sealed_calls_keep_checksum(self, vault, rng):
        before = vault.checksum
        for _ in range(3):
            _run(vault, {VISION_PIXELS: _pixels(rng), TEXT_TOKEN_IDS: _ids(rng).astype(np.float32),
                         prefix_entry_id("text", 0): np.ones((1, 64), np.float32)})
        assert vault.checksum == before


class TestOwner:
    def test_wrong_credential(self, vault):
        with pytest.raises(AccessError):
            vault.owner_unlock(43)

    def test_unlock_without_edit_keeps_checksum(self):
        v = build_vault(7)
        before = v.checksum
        h = v.owner_unlock(7)
        assert h.update({}) == before == v.checksum

    def test_update_changes_checksum(self):
        v = build_vault(7)
        h = v.owner_unlock(7)
        p = h.parameters()
        before = v.checksum
        assert h.update({"text.proj": p["text.proj"] * 2}) != before

    def test_update_refused_with_open_session(self):
        v = build_vault(7)
        h = v.owner_unlock(7)
        s = v.open_session()
        with pytest.raises(SessionStateError):
            h.update({})
        v.close_session(s)
        h.update({})

    def test_last_layers_audit(self, vault):
        names = vault.owner_unlock(42).last_layers(1)
        blocks = {n.rsplit(".", 1)[0] for n in names if ".blocks." in n}
        assert blocks == {"vision.blocks.3", "text.blocks.3"}
        assert {n for n in names if ".blocks." not in n} == {"vision.proj", "text.proj"}
        assert len(names) == 2 * 12 + 2

    def test_last_all_layers_is_full_block_set(self, vault):
        h = vault.owner_unlock(42)
        blocks = {n for n in h.trainable_names() if ".blocks." in n}
        assert blocks <= set(h.last_layers(4))
        assert set(h.last_layers(4)) == set(h.trainable_names())

    def test_save_load_roundtrip(self, vault, tmp_path):
        path = tmp_path / "v.gbv"
        vault.owner_unlock(42).save(path)
        assert load_vault(path).checksum == vault.checksum


class TestOpacity:
    def test_sealed_surface_is_enumerated(self):
        public = {n for n, _ in inspect.getmembers(Vault) if not n.startswith("_")}
        assert public == set(SEALED_SURFACE)

    def test_no_member_returns_parameters(self):
        allowed = {"integrity-digest", "size-scalar", "descriptors", "embeddings-of-requested-ids", "session-handle",
                   "none", "output-features", "entry-gradients", "owner-handle (credential-gated)"}
        assert set(SEALED_SURFACE.values()) <= allowed

    def test_sealed_returns_are_not_parameter_arrays(self, vault, rng):
        """No tensor returned by the sealed API shares memory with, or equals, a parameter block."""
        params = vault.owner_unlock(42).parameters()
        out, grads = _run(vault, {VISION_PIXELS: _pixels(rng), TEXT_TOKEN_IDS: _ids(rng).astype(np.float32)})
        returned = list(out.values()) + list(grads.values()) + [vault.embed_tokens([1, 2])]
        for t in returned:
            assert not any(np.shares_memory(t.numpy(), v) for v in vault._params.values() for v in [v.data])
            assert all(t.dims != p.shape for p in params.values() if p.size > 64 * 64)
