"""Byte-level tokenizer: raw UTF-8 bytes plus four special ids."""

from __future__ import annotations

PAD = 256
BOS = 257
EOS = 258
SEP = 259

VOCAB_SIZE = 260


class ByteTokenizer:
    """Maps text to byte ids 0..255; specials mark stream boundaries.

    SEP terminates the question stream fed to the joint encoder, BOS/EOS
    bracket the answer stream on the decoder side.
    """

    pad_id = PAD
    bos_id = BOS
    eos_id = EOS
    sep_id = SEP
    vocab_size = VOCAB_SIZE

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")

    def question_ids(self, text: str, max_len: int) -> list[int]:
        """BOS + bytes + SEP, truncated to fit max_len."""
        body = self.encode(text)[: max(0, max_len - 2)]
        return [BOS] + body + [SEP]

    def answer_ids(self, text: str, max_len: int) -> list[int]:
        """Answer bytes truncated so BOS+answer+EOS fits max_len."""
        return self.encode(text)[: max(0, max_len - 2)]
