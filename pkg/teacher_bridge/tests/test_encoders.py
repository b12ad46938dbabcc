import numpy as np
import pytest
import torch

from teacher_bridge.encoders import (EMBED_DIM, TinyEncoder, get_encoder,
                                     image_to_tensor)
from teacher_bridge.errors import ModelUnavailableError


def random_image(seed=0, size=48):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


class TestTinyEncoder:
    def test_same_image_twice_gives_identical_embeddings(self):
        enc = TinyEncoder(seed=0)
        img = image_to_tensor(random_image())
        with torch.no_grad():
            a = enc.embed_image_tensor(img)
            b = enc.embed_image_tensor(img)
        assert torch.equal(a, b)

    def test_embedding_width_is_512(self):
        enc = TinyEncoder(seed=0)
        img = image_to_tensor(random_image())
        with torch.no_grad():
            emb = enc.embed_image_tensor(img)
        assert emb.shape == (1, EMBED_DIM)
        texts = enc.embed_texts(["A person walking", "A person running"])
        assert texts.shape == (2, EMBED_DIM)

    def test_weights_are_reproducible_across_instances(self):
        a = TinyEncoder(seed=3)
        b = TinyEncoder(seed=3)
        img = image_to_tensor(random_image(1))
        with torch.no_grad():
            assert torch.equal(a.embed_image_tensor(img),
                               b.embed_image_tensor(img))
        assert torch.equal(a.embed_texts(["hello"]), b.embed_texts(["hello"]))

    def test_different_seeds_differ(self):
        img = image_to_tensor(random_image(1))
        with torch.no_grad():
            a = TinyEncoder(seed=1).embed_image_tensor(img)
            b = TinyEncoder(seed=2).embed_image_tensor(img)
        assert not torch.equal(a, b)

    def test_text_tokenization_ignores_case_and_punctuation(self):
        enc = TinyEncoder(seed=0)
        a = enc.embed_texts(["A person walking!"])
        b = enc.embed_texts(["a PERSON walking"])
        assert torch.equal(a, b)

    def test_image_tensor_validation(self):
        with pytest.raises(ValueError):
            image_to_tensor(np.zeros((4, 4)))

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError):
            get_encoder("resnet")


def clip_available():
    try:
        get_encoder("clip")
        return True
    except ModelUnavailableError:
        return False


@pytest.mark.skipif(not clip_available(),
                    reason="CLIP weights not reachable in this environment")
class TestClipSemantics:
    """Sanity checks that need the real teacher; they run wherever the
    ViT-B/32 weights are cached."""

    def test_prompt_similarity_ordering(self):
        enc = get_encoder("clip")
        embs = enc.embed_texts(["A person walking", "A person running",
                                "A person sleeping"])
        embs = torch.nn.functional.normalize(embs, dim=1)
        walk_run = float(embs[0] @ embs[1])
        walk_sleep = float(embs[0] @ embs[2])
        assert walk_run > walk_sleep
