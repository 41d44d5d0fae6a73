import hashlib

import numpy as np
import pytest
import torch

from platediff.data import DEFAULT_CLASSES
from platediff.domain import Stage
from platediff.encoders import (
    CachedEncoder,
    ClipEncoder,
    StubEncoder,
    build_prompt,
    make_encoder,
    patch_statistics,
    read_matrix,
    write_matrix,
)
from platediff.errors import BackendUnavailable, ValidationError


def test_prompt_templates():
    assert build_prompt("banana", Stage.ABSOLUTE) == "What is the weight of the banana in this image?"
    assert (
        build_prompt("mashed potatoes", "difference")
        == "What is the difference in weight of the mashed potatoes in these images?"
    )
    with pytest.raises(ValueError):
        build_prompt("", Stage.ABSOLUTE)


def test_stub_patch_shape(stub):
    img = np.full((336, 336, 3), 90, dtype=np.uint8)
    f = stub.encode_image(img)
    assert f.matrix.shape == (576, 64) == (stub.info.N, stub.info.D_I)
    assert f.matrix.dtype == np.float32


def test_stub_black_image_is_zero_projection(stub):
    f = stub.encode_image(np.zeros((336, 336, 3), dtype=np.uint8)).matrix
    # zero statistics vector projected by a bias-free linear map is the zero vector
    expected = (np.zeros(4) @ stub.image_matrix.T).astype(np.float32)
    assert np.array_equal(f, np.broadcast_to(expected, f.shape))
    assert (f == f[0]).all()


def test_stub_image_is_deterministic(stub, small_samples):
    a = stub.encode_image(small_samples[0].before_image).matrix
    b = StubEncoder().encode_image(small_samples[0].before_image).matrix
    assert np.array_equal(a, b)


def test_patch_statistics_by_hand():
    img = np.zeros((28, 28, 3), dtype=np.uint8)
    img[:14, :14] = (255, 0, 0)
    img[14:, 14:, :] = 255
    img[14:, 14:21, :] = 0  # half white / half black patch
    stats = patch_statistics(img, 14)
    assert stats.shape == (4, 4)
    assert np.allclose(stats[0], [1, 0, 0, 0])
    assert np.allclose(stats[1], [0, 0, 0, 0])
    assert np.allclose(stats[3], [0.5, 0.5, 0.5, 0.5])


def _oracle_bag(stub, prompt):
    # independent reimplementation of the token-to-bin rule
    k = len(stub.reserved)
    bag = np.zeros(64)
    for raw in prompt.lower().split():
        tok = raw.strip("?.,!;:\"'()[]")
        if not tok:
            continue
        if tok in stub.reserved:
            bag[stub.reserved[tok]] += 1
        else:
            h = hashlib.blake2b(tok.encode(), digest_size=8, key=b"0").digest()
            bag[k + int.from_bytes(h, "little") % (64 - k)] += 1
    return bag


def test_stub_text_matches_hash_projection(stub):
    for prompt in ["apple", build_prompt("apple", Stage.ABSOLUTE), build_prompt("red_blob", Stage.DIFFERENCE)]:
        expected = (stub.text_matrix @ _oracle_bag(stub, prompt)).astype(np.float32)
        assert np.array_equal(stub.encode_text(prompt).vector[0], expected)


def test_stub_text_deterministic_and_injective_over_items(stub):
    p = build_prompt("apple", Stage.ABSOLUTE)
    assert np.array_equal(stub.encode_text(p).vector, stub.encode_text(p).vector)
    vecs = [stub.encode_text(build_prompt(c.name, Stage.ABSOLUTE)).vector for c in DEFAULT_CLASSES]
    vecs.append(stub.encode_text(build_prompt("apple", Stage.ABSOLUTE)).vector)
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            assert not np.allclose(vecs[i], vecs[j])


def test_stub_joint_space_ranks_own_colour_first(stub):
    patches = {c.name: stub.encode_image(np.full((336, 336, 3), c.color, np.uint8)).matrix[0] for c in DEFAULT_CLASSES}
    bg = stub.encode_image(np.full((336, 336, 3), 128, np.uint8)).matrix[0]
    for c in DEFAULT_CLASSES:
        t = stub.encode_text(build_prompt(c.name, Stage.ABSOLUTE)).vector[0]
        scores = {name: float(t @ p) for name, p in patches.items()}
        assert max(scores, key=scores.get) == c.name
        assert scores[c.name] > float(t @ bg)


def test_stub_rejects_inseparable_palette():
    from platediff.errors import SpecError

    with pytest.raises(SpecError):
        StubEncoder(classes=[("a_one", (100, 100, 100)), ("b_two", (101, 100, 100)), ("c_three", (200, 200, 200))],
                    background=(255, 255, 255))


def test_stub_resizes_other_sizes(stub):
    f = stub.encode_image(np.full((100, 150, 3), 40, dtype=np.uint8))
    assert f.matrix.shape == (576, 64)


def test_matrix_file_round_trip(tmp_path):
    m = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    write_matrix(tmp_path / "m.bin", m)
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"PDFC" and len(raw) == 16 + m.nbytes
    back = read_matrix(tmp_path / "m.bin")
    assert back.dtype == np.float32 and np.array_equal(back, m)
    write_matrix(tmp_path / "d.bin", m.astype(np.float64))
    assert read_matrix(tmp_path / "d.bin").dtype == np.float64


def test_cached_encoder_hits_disk(tmp_path, small_samples, stub):
    enc = CachedEncoder(stub, tmp_path)
    img = small_samples[0].before_image
    a = enc.encode_image(img).matrix
    files = list(tmp_path.rglob("*.bin"))
    assert len(files) == 1
    b = enc.encode_image(img).matrix
    assert np.array_equal(a, b)
    t = enc.encode_text("What is the weight of the red_blob in this image?").vector
    assert np.array_equal(t, stub.encode_text("What is the weight of the red_blob in this image?").vector)
    assert len(list(tmp_path.rglob("*.bin"))) == 2
    assert enc.parameter_digest() == stub.parameter_digest()


def test_feature_records_reject_non_finite():
    from platediff.encoders import PatchFeatures, TextFeature

    with pytest.raises(ValidationError):
        PatchFeatures(np.array([[np.nan]]))
    with pytest.raises(ValidationError):
        TextFeature(np.zeros(3))


def test_pretrained_backend_unavailable_offline():
    with pytest.raises(BackendUnavailable):
        ClipEncoder("no-such-org/no-such-model", local_files_only=True)


class _Tok:
    def __call__(self, texts, padding=True, return_tensors="pt"):
        ids = [[49406] + [hash(w) % 400 + 10 for w in t.split()] + [49407] for t in texts]
        return {"input_ids": torch.tensor(ids), "attention_mask": torch.ones(len(ids), len(ids[0]), dtype=torch.long)}


def test_clip_adapter_shapes_with_tiny_model():
    from transformers import CLIPConfig, CLIPModel

    torch.manual_seed(0)
    cfg = CLIPConfig(
        text_config=dict(vocab_size=49408, hidden_size=32, intermediate_size=37, num_hidden_layers=1,
                         num_attention_heads=2, max_position_embeddings=32, eos_token_id=49407),
        vision_config=dict(hidden_size=48, intermediate_size=37, num_hidden_layers=1, num_attention_heads=2,
                           image_size=56, patch_size=14),
        projection_dim=24,
    )
    enc = make_encoder("pretrained", model=CLIPModel(cfg), tokenizer=_Tok())
    assert (enc.info.N, enc.info.D_I, enc.info.D_T) == (16, 48, 24)
    before = enc.parameter_digest()
    img = np.random.default_rng(0).integers(0, 255, (80, 60, 3), dtype=np.uint8)
    f = enc.encode_image(img)
    assert f.matrix.shape == (16, 48)
    assert np.array_equal(f.matrix, enc.encode_image(img).matrix)
    t = enc.encode_text("What is the weight of the apple in this image?")
    assert t.vector.shape == (1, 24)
    assert enc.parameter_digest() == before
    assert not any(p.requires_grad for p in enc.model.parameters())
