#!/usr/bin/env python3
"""Export a CLIP dual encoder as a TorchScript archive for the wpclip
torchscript backend.

    export_clip.py --model openai/clip-vit-base-patch32 --out clip-b32
    export_clip.py --tiny-random --seed 0 --out tiny        # test fixture

Then `wpclip init-checkpoint --backend torchscript --from <out> --out <ckpt>`.

--probe FILE additionally writes reference token ids and embeddings computed
by the Python model, used to cross-check the C++ side.
"""

import argparse
import json
import math
import os
import sys
from collections import Counter

import torch

FORMAT = "wpclip-torchscript-1"
CONTEXT_LENGTH = 77
CLIP_MEAN = [0.48145466, 0.4578275, 0.40821073]
CLIP_STD = [0.26862954, 0.26130258, 0.27577711]

PROBE_PROMPTS = [
    "Linear", "Painterly", "Closed", "Open", "Absolute", "Relative",
    "Planar", "Recessional", "Multiplicity", "Unity",
    "a Linear painting.", "An OPEN-form   composition, 1650's", "it's 42!!",
]

TINY_CORPUS = (
    "linear painterly closed open absolute relative planar recessional "
    "multiplicity unity a painting of style in the with an form composition "
    "baroque renaissance clarity unclear multiple united plane recession"
).split()


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def learn_merges(words, count):
    """Greedy BPE over a tiny corpus; ties go to the lexicographically first pair."""
    table = bytes_to_unicode()
    seqs = Counter()
    for w in words:
        sym = [table[b] for b in w.encode("utf-8")]
        sym[-1] += "</w>"
        seqs[tuple(sym)] += 1
    merges = []
    for _ in range(count):
        pairs = Counter()
        for seq, n in seqs.items():
            for a, b in zip(seq, seq[1:]):
                pairs[(a, b)] += n
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        merges.append(best)
        out = Counter()
        for seq, n in seqs.items():
            merged, i = [], 0
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == best:
                    merged.append(seq[i] + seq[i + 1])
                    i += 2
                else:
                    merged.append(seq[i])
                    i += 1
            out[tuple(merged)] += n
        seqs = out
    return merges


def write_tokenizer(out, merges):
    base = list(bytes_to_unicode().values())
    vocab = base + [v + "</w>" for v in base] + ["".join(m) for m in merges]
    vocab += ["<|startoftext|>", "<|endoftext|>"]
    with open(os.path.join(out, "vocab.json"), "w", encoding="utf-8") as f:
        json.dump({tok: i for i, tok in enumerate(vocab)}, f, ensure_ascii=False)
    with open(os.path.join(out, "merges.txt"), "w", encoding="utf-8") as f:
        f.write("#version: 0.2\n")
        for a, b in merges:
            f.write(f"{a} {b}\n")
    return len(vocab)


class DualEncoder(torch.nn.Module):
    def __init__(self, clip):
        super().__init__()
        self.clip = clip

    @staticmethod
    def _tensor(out):
        return out if torch.is_tensor(out) else out.pooler_output

    def encode_image(self, pixel_values):
        return self._tensor(self.clip.get_image_features(pixel_values=pixel_values))

    def encode_text(self, input_ids, attention_mask):
        return self._tensor(self.clip.get_text_features(input_ids=input_ids, attention_mask=attention_mask))

    def forward(self, pixel_values):
        return self.encode_image(pixel_values)


def load_tokenizer(out):
    import inspect
    from transformers import CLIPTokenizer
    vocab_path, merges_path = os.path.join(out, "vocab.json"), os.path.join(out, "merges.txt")
    if "vocab_file" in inspect.signature(CLIPTokenizer.__init__).parameters:
        return CLIPTokenizer(vocab_file=vocab_path, merges_file=merges_path, pad_token="<|endoftext|>")
    with open(vocab_path, encoding="utf-8") as f:
        vocab = json.load(f)
    with open(merges_path, encoding="utf-8") as f:
        merges = [tuple(line.split()) for line in f.read().splitlines()[1:] if line]
    return CLIPTokenizer(vocab=vocab, merges=merges, pad_token="<|endoftext|>")


def tokenize(tok, prompts):
    enc = tok(prompts, padding="max_length", max_length=CONTEXT_LENGTH, truncation=False, return_tensors="pt")
    # Pad with the end marker; the text tower pools at its first occurrence.
    ids = enc["input_ids"].clone()
    ids[enc["attention_mask"] == 0] = tok.convert_tokens_to_ids("<|endoftext|>")
    return ids, enc["attention_mask"]


def probe_image(size):
    # Deterministic planar tensor; the C++ cross-check rebuilds it from this formula.
    idx = torch.arange(3 * size * size, dtype=torch.float64)
    return torch.sin(idx * 0.01).to(torch.float32).reshape(1, 3, size, size)


def build_tiny(seed):
    from transformers import CLIPConfig, CLIPModel
    return lambda vocab_size, bos, eos: CLIPModel(CLIPConfig(
        text_config=dict(vocab_size=vocab_size, hidden_size=32, intermediate_size=64, num_hidden_layers=2,
                         num_attention_heads=4, max_position_embeddings=CONTEXT_LENGTH,
                         bos_token_id=bos, eos_token_id=eos, pad_token_id=eos),
        vision_config=dict(hidden_size=32, intermediate_size=64, num_hidden_layers=2, num_attention_heads=4,
                           image_size=32, patch_size=8),
        projection_dim=16))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="Hugging Face model id or local directory")
    src.add_argument("--tiny-random", action="store_true", help="random-init tiny CLIP (tests)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True)
    ap.add_argument("--probe", help="write reference outputs to this JSON file")
    args = ap.parse_args(argv)

    os.makedirs(args.out, exist_ok=True)
    torch.manual_seed(args.seed)
    if args.tiny_random:
        vocab_size = write_tokenizer(args.out, learn_merges(TINY_CORPUS, 80))
        tok = load_tokenizer(args.out)
        start, end = tok.convert_tokens_to_ids(["<|startoftext|>", "<|endoftext|>"])
        clip = build_tiny(args.seed)(vocab_size, start, end)
        model_id = f"tiny-random-clip-s{args.seed}"
        image_size, mean, std = 32, CLIP_MEAN, CLIP_STD
    else:
        from transformers import CLIPImageProcessor, CLIPModel, CLIPTokenizer
        clip = CLIPModel.from_pretrained(args.model)
        CLIPTokenizer.from_pretrained(args.model).save_vocabulary(args.out)
        tok = load_tokenizer(args.out)
        proc = CLIPImageProcessor.from_pretrained(args.model)
        crop = proc.crop_size
        image_size = crop["height"] if isinstance(crop, dict) else int(crop)
        mean, std = list(proc.image_mean), list(proc.image_std)
        model_id = args.model.rstrip("/").split("/")[-1] if os.path.isdir(args.model) else args.model
    clip.eval()

    wrapper = DualEncoder(clip).eval()
    ids, mask = tokenize(tok, ["a painting", "linear"])
    pixels = torch.randn(2, 3, image_size, image_size)
    traced = torch.jit.trace_module(wrapper, {"encode_image": pixels, "encode_text": (ids, mask)},
                                    check_trace=False)
    traced.save(os.path.join(args.out, "model.pt"))
    embed_dim = int(traced.encode_image(pixels).shape[1])

    meta = {
        "format": FORMAT,
        "model_id": model_id,
        "embed_dim": embed_dim,
        "context_length": CONTEXT_LENGTH,
        "image_size": image_size,
        "channel_mean": mean,
        "channel_std": std,
        "torch_version": torch.__version__,
    }
    with open(os.path.join(args.out, "export.json"), "w") as f:
        json.dump(meta, f, indent=2)

    if args.probe:
        with torch.no_grad():
            pids, pmask = tokenize(tok, PROBE_PROMPTS)
            text = torch.nn.functional.normalize(wrapper.encode_text(pids, pmask).double(), dim=1)
            image = torch.nn.functional.normalize(wrapper.encode_image(probe_image(image_size)).double(), dim=1)
        probe = {
            "prompts": [
                {"text": p, "ids": tok(p)["input_ids"][1:-1], "embedding": text[i].tolist()}
                for i, p in enumerate(PROBE_PROMPTS)
            ],
            "image": {"formula": "sin(0.01 * flat_index)", "size": image_size, "embedding": image[0].tolist()},
        }
        with open(args.probe, "w") as f:
            json.dump(probe, f)
    print(json.dumps(meta))
    return 0


if __name__ == "__main__":
    sys.exit(main())
