#!/usr/bin/env python3
"""Export a BERT encoder to TorchScript for the pretrained text backend.

Writes <out>/model.pt with forward(input_ids, attention_mask) -> last hidden
state [B, T, 768] and <out>/vocab.txt.

  export_bert.py --out models/bert-base-uncased                  # published weights
  export_bert.py --out build/tiny-bert --random --layers 1       # test fixture
"""
import argparse
import pathlib
import sys



def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", required=True)
    parser.add_argument("--name", default="bert-base-uncased", help="HuggingFace model id or local directory")
    parser.add_argument("--random", action="store_true", help="randomly initialised weights, no download")
    parser.add_argument("--layers", type=int, default=12)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    try:
        import torch
        from transformers import BertConfig, BertModel
    except ImportError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return 3

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(args.seed)

    if args.random:
        words = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", ",", "the", "a", "lesion", "nodule", "mass",
                 "tumor", "in", "left", "right", "upper", "lower", "part", "with", "round", "shape", "largest",
                 "smallest", "##s", "##est"]
        config = BertConfig(vocab_size=len(words), hidden_size=768, num_hidden_layers=args.layers,
                            num_attention_heads=12, intermediate_size=256, max_position_embeddings=64,
                            attn_implementation="eager")
        model = BertModel(config, add_pooling_layer=False)
        (out / "vocab.txt").write_text("\n".join(words) + "\n")
    else:
        from transformers import BertTokenizer
        model = BertModel.from_pretrained(args.name, add_pooling_layer=False, attn_implementation="eager")
        BertTokenizer.from_pretrained(args.name).save_vocabulary(str(out))
    model.eval()

    class Wrapper(torch.nn.Module):
        def __init__(self, bert):
            super().__init__()
            self.bert = bert

        def forward(self, input_ids, attention_mask):
            return self.bert(input_ids=input_ids, attention_mask=attention_mask).last_hidden_state

    ids = torch.zeros(1, 8, dtype=torch.long)
    # A padded example keeps the mask path in the traced graph.
    mask = torch.tensor([[1, 1, 1, 1, 1, 0, 0, 0]], dtype=torch.long)
    traced = torch.jit.trace(Wrapper(model), (ids, mask), strict=False)
    traced.save(str(out / "model.pt"))
    print(f"wrote {out / 'model.pt'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
