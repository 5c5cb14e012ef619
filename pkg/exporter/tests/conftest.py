import json
import re

import pytest
import torch
from tokenizers import Tokenizer, models, pre_tokenizers
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

from dagcd_exporter.templates import list_templates

EXAMPLES = [
    {"id": "ex0", "context": "Paris is the capital of France .",
     "question": "What is the capital of France ?", "answers": ["Paris"]},
    {"id": "ex1", "context": "The Nile is the longest river .",
     "question": "Which river is the longest ?", "answers": ["the Nile"]},
    {"id": "ex2", "context": "Oxygen is essential for life .",
     "question": "What is essential for life ?", "answers": ["Oxygen"]},
    {"id": "ex3", "context": "The capital of Japan is Tokyo .",
     "question": "What is the capital of Japan ?", "answers": ["Tokyo"]},
    {"id": "ex4", "context": "Rivers flow into the sea .",
     "question": "Where do rivers flow ?", "answers": ["the sea"]},
]


def _words(text):
    return re.findall(r"\w+|[^\w\s]+", text)


@pytest.fixture(scope="session")
def checkpoint_dir(tmp_path_factory):
    """A tiny word-level GPT-2 checkpoint saved to disk."""
    d = tmp_path_factory.mktemp("tiny-gpt2")
    corpus = set()
    for t in list_templates():
        corpus.update(_words(t.text.replace("{context}", "").replace("{question}", "")))
    for ex in EXAMPLES:
        corpus.update(_words(ex["context"]))
        corpus.update(_words(ex["question"]))
    vocab = {"[UNK]": 0, "[EOS]": 1}
    for w in sorted(corpus):
        vocab[w] = len(vocab)
    tok = Tokenizer(models.WordLevel(vocab, unk_token="[UNK]"))
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=tok, unk_token="[UNK]", eos_token="[EOS]"
    )
    config = GPT2Config(
        vocab_size=len(vocab), n_positions=128, n_embd=32, n_layer=2, n_head=2,
        bos_token_id=1, eos_token_id=1,
    )
    torch.manual_seed(0)
    model = GPT2LMHeadModel(config)
    model.eval()
    model.save_pretrained(d)
    tokenizer.save_pretrained(d)
    return d


@pytest.fixture(scope="session")
def dataset_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("data") / "qa.jsonl"
    p.write_text("\n".join(json.dumps(ex) for ex in EXAMPLES) + "\n")
    return p
