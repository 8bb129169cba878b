import csv
import pathlib

import pytest
import torch


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A deterministic miniature BERT saved to disk, built offline."""
    from transformers import BertConfig, BertModel, BertTokenizer

    d = tmp_path_factory.mktemp("tiny-bert")
    vocab = (["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
             + list("abcdefghijklmnopqrstuvwxyz")
             + ["##" + c for c in "abcdefghijklmnopqrstuvwxyz"])
    (d / "vocab.txt").write_text("\n".join(vocab) + "\n")
    tokenizer = BertTokenizer(str(d / "vocab.txt"))
    config = BertConfig(vocab_size=len(vocab), hidden_size=32,
                        num_hidden_layers=2, num_attention_heads=2,
                        intermediate_size=64, max_position_embeddings=64)
    torch.manual_seed(1234)
    model = BertModel(config)
    model.eval()
    model.save_pretrained(d)
    tokenizer.save_pretrained(d)
    return str(d)


@pytest.fixture(scope="session")
def tiny_revision(tiny_model_dir):
    from adae_export.encoder import load_encoder
    _, _, revision = load_encoder(tiny_model_dir, None)
    return revision


def write_corpus(path: pathlib.Path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["text", "label"])
        writer.writerows(rows)
    return str(path)


@pytest.fixture()
def toy_corpus(tmp_path):
    """100 rows over three lexicographically unsorted label names."""
    words = ["abc", "def", "ghi", "jkl", "mno", "pqr", "stu", "vwx"]
    rows = []
    for i in range(100):
        text = " ".join(words[(i + j) % len(words)] for j in range(3 + i % 4))
        label = ["pos", "neg", "mid"][i % 3]
        rows.append([text, label])
    return write_corpus(tmp_path / "corpus.csv", rows)
