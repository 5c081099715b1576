"""Regenerate the token layout golden files from the closed-form offsets.

Within frame f the context token sits at offset 0, spatial token (i, j) at
1 + i*(w+1) + j and the <row> token of row i at 1 + i*(w+1) + w. With no_row
the stride is w and there is no <row> token.

    python3 tests/golden/make_golden.py
"""

from pathlib import Path

HERE = Path(__file__).resolve().parent


def manifest(T, h, w, no_row=False):
    stride = w if no_row else w + 1
    per = 1 + h * stride
    lines = ["index\trole\tframe\trow\tcol"]
    for k in range(T * per):
        f, u = divmod(k, per)
        if u == 0:
            lines.append(f"{k}\tcontext\t{f}\t-1\t-1")
            continue
        i, j = divmod(u - 1, stride)
        if j == w:
            lines.append(f"{k}\trow_split\t{f}\t{i}\t-1")
        else:
            lines.append(f"{k}\tspatial\t{f}\t{i}\t{j}")
    return "\n".join(lines) + "\n"


if __name__ == "__main__":
    (HERE / "layout_T8_h4_w4.tsv").write_text(manifest(8, 4, 4))
    (HERE / "layout_T8_h4_w4_no_row.tsv").write_text(manifest(8, 4, 4, no_row=True))
