"""Freeze reference CLIP token ids for the tokenizer corpus.

Runs the original OpenAI CLIP `SimpleTokenizer` (vendored in open_clip, with
OpenAI's `<|startoftext|>` / `<|endoftext|>` special-token names restored)
over every prompt in the corpus.
Writes `tokenizer_reference.json`: a list of {prompt, ids} with 77 ids each,
padded with id 0 after the end marker.
"""
import json
import sys

import regex

sys.path.insert(0, "/tmp/oc")
from open_clip.tokenizer import SimpleTokenizer  # noqa: E402

SUBJECTS = [
    "a cute and adorable bunny",
    "a cute and adorable elephant",
    "a cute and adorable squirrel",
    "a beautiful cityscape",
    "a very very very very very beautiful cityscape",
    "a majestic lion",
    "an old lighthouse on a cliff",
    "a cozy cabin in the snowy woods",
    "a futuristic city at night",
    "a portrait of a wise old wizard",
]
MODIFIERS = [
    "",
    ", highly detailed",
    ", trending on artstation",
    ", in the style of cute pixar character",
    ", digital painting, concept art, sharp focus",
    ", 4k, 8k, unreal engine, octane render",
    ", by greg rutkowski and alphonse mucha",
    ", photorealistic, cinematic lighting, hdr",
]

EDGE = [
    "",
    "   ",
    "hello world",
    "Hello   World",
    "  leading and trailing spaces  ",
    "UPPER CASE PROMPT WITH MODIFIERS, TRENDING ON ARTSTATION",
    "it's a dog's life, isn't it? we'll see, they'd say, you're right, I've, I'm",
    "numbers 1234567890 and 3.14159 and 1,000,000",
    "punctuation!!! ??? ... --- *** ### @@@",
    "a cat (wearing a hat) [masterpiece] {best quality}",
    "emoji 🐰🐘🐿️ bunny",
    "café naïve résumé façade",
    "café decomposed accent",
    "日本の桜 cherry blossoms",
    "Ünïcödé ÄÖÜ ß straße",
    "curly “quotes” and ‘apostrophes’ it’s",
    "tabs\tand\nnewlines\r\nmixed",
    "hyphenated-words and under_scores and slash/separated",
    "<|startoftext|> literal special <|endoftext|>",
    "supercalifragilisticexpialidocious antidisestablishmentarianism",
    "x" * 300,
    " ".join(["word"] * 200),
    " ".join(f"token{i}" for i in range(120)),
    "a ,b ;c :d",
    "The quick brown fox jumps over the lazy dog.",
    "ΑΒΓ greek ΣΊΣΥΦΟΣ",
    "mixed123letters456 and 7up",
    "e-mail@example.com https://example.org/path?q=1",
    " non-breaking space",
    "a photo of a cat, 35mm, f/1.8, bokeh",
]


def corpus():
    prompts = []
    for s in SUBJECTS:
        for m in MODIFIERS[:7]:
            prompts.append(s + m)
    prompts += EDGE
    assert len(prompts) == 100, len(prompts)
    return prompts


def openai_tokenizer():
    tok = SimpleTokenizer()
    specials = {"<start_of_text>": "<|startoftext|>", "<end_of_text>": "<|endoftext|>"}
    for old, new in specials.items():
        tok.encoder[new] = tok.encoder.pop(old)
        tok.decoder[tok.encoder[new]] = new
    tok.cache = {t: t for t in specials.values()}
    tok.pat = regex.compile(
        r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
        regex.IGNORECASE,
    )
    return tok


def main(vocab_dir, out_path):
    oc = openai_tokenizer()
    vocab = json.load(open(f"{vocab_dir}/vocab.json", encoding="utf-8"))
    assert vocab == oc.encoder, "exported vocabulary differs from the reference"
    out = []
    for p in corpus():
        ids = oc(p)[0].tolist()
        out.append({"prompt": p, "ids": ids})
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(out, f, ensure_ascii=False, indent=1)
    print(len(out), "prompts frozen")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
