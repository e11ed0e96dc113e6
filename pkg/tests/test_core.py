import pytest
import torch

from mcti.core import (
    T1,
    ConceptToken,
    FewShotDataset,
    Phase,
    PromptLibrary,
    PromptTemplate,
    TrainConfig,
    check_unique_pseudo_words,
    init_token_embedding,
    load_templates,
    pseudo_word,
    render_prompt,
)
from mcti.errors import EmptyStringError, OutOfVocabularyError, PlaceholderError


def test_template_needs_exactly_one_placeholder():
    PromptTemplate("ok", "a photo of a {}").validate()
    with pytest.raises(PlaceholderError):
        PromptTemplate("none", "a photo").validate()
    with pytest.raises(PlaceholderError):
        PromptTemplate("two", "{} and {}").validate()


def test_load_templates_assigns_ids_by_line_order(tmp_path):
    p = tmp_path / "lib.txt"
    p.write_text("a photo of a {}\n\nthe {}\n", encoding="utf-8")
    ts = load_templates(p, prefix="x")
    assert [t.template_id for t in ts] == ["x00", "x01"]
    assert ts[1].render("cat") == "the cat"


def test_load_templates_rejects_bad_line(tmp_path):
    p = tmp_path / "lib.txt"
    p.write_text("a photo\n", encoding="utf-8")
    with pytest.raises(PlaceholderError):
        load_templates(p)


def test_default_library():
    lib = PromptLibrary.default()
    assert len(lib.visualization_templates) == 27
    assert lib.inference_template == T1
    texts = {t.text for t in lib.visualization_templates}
    assert {"a photo of a {}", "a photo of the nice {}", "a cropped photo of the {}"} <= texts
    assert lib.template("T2").text == "a photo of the nice {}"
    with pytest.raises(KeyError):
        lib.template("nope")


def test_library_needs_27_visualization_templates():
    with pytest.raises(ValueError):
        PromptLibrary(training_templates=(T1,), visualization_templates=(T1,))


def test_render_prompt_has_one_slot(backend):
    tok = init_token_embedding("object", backend, class_index=2)
    prompt = render_prompt(T1, tok, backend)
    assert prompt.pseudo_word == "<s*_2>"
    assert prompt.ids[prompt.slot] == backend.pseudo_word_id("<s*_2>")
    assert sum(i == prompt.ids[prompt.slot] for i in prompt.ids) == 1


def test_init_copies_first_subtoken(backend):
    tok = init_token_embedding("object", backend)
    ids = backend.tokenize("object")
    assert torch.equal(tok.embedding, backend.vocab_embeddings([ids[0]])[0])
    assert tok.phase is Phase.WARMUP and tok.steps_trained == 0
    multi = init_token_embedding("dogcat", backend, class_index=3)
    assert torch.equal(multi.embedding, backend.vocab_embeddings(backend.tokenize("dog"))[0])


def test_init_rejects_empty_and_unknown(backend):
    with pytest.raises(EmptyStringError):
        init_token_embedding("  ", backend)
    with pytest.raises(OutOfVocabularyError):
        init_token_embedding("123", backend)


def test_concept_token_validates():
    with pytest.raises(ValueError):
        ConceptToken("1", pseudo_word(1), torch.tensor([float("nan")]), "object")
    with pytest.raises(ValueError):
        ConceptToken("1", pseudo_word(1), torch.zeros(2, 2), "object")
    with pytest.raises(ValueError):
        pseudo_word(0)


def test_unique_pseudo_words():
    a = ConceptToken("1", "<s*_1>", torch.zeros(3), "x")
    with pytest.raises(ValueError):
        check_unique_pseudo_words([a, a.copy()])


def test_few_shot_dataset_validation():
    with pytest.raises(ValueError):
        FewShotDataset(K=2, N=1, samples={1: ("a",)})
    with pytest.raises(ValueError):
        FewShotDataset(K=1, N=2, samples={1: ("a",)})
    ds = FewShotDataset(K=2, N=1, samples={1: ("a",), 2: ("b",)})
    assert ds.keys() == [(1, 1), (2, 1)] and ds.ref(2, 1) == "b"


def test_train_config_defaults_and_checks():
    c = TrainConfig()
    assert (c.alpha, c.beta, c.scale_s, c.lr, c.warmup_steps, c.mcti_steps) == (1, 1, 10, 5e-4, 3000, 100)
    for bad in ({"alpha": -1}, {"scale_s": 0}, {"lr": 0}, {"mcti_steps": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
