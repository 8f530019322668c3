"""Regenerate the bundled calibration/evaluation corpora.

The text is the docstrings of a fixed list of standard-library modules,
collected in a deterministic order. The first 90% of documents form the
calibration corpus and the remainder the evaluation corpus.
"""

import argparse
import importlib
import inspect
from pathlib import Path

MODULES = [
    "abc", "argparse", "ast", "base64", "bisect", "calendar", "cmd", "codecs", "collections",
    "colorsys", "configparser", "contextlib", "copy", "csv", "dataclasses", "datetime", "decimal",
    "difflib", "dis", "doctest", "email.message", "email.utils", "enum", "filecmp", "fnmatch",
    "fractions", "ftplib", "functools", "getopt", "gettext", "glob", "gzip", "hashlib", "heapq",
    "hmac", "html.parser", "http.client", "http.cookies", "imaplib", "inspect", "io", "ipaddress",
    "json", "keyword", "linecache", "locale", "logging", "lzma", "mailbox", "mimetypes",
    "numbers", "operator", "optparse", "os", "pathlib", "pdb", "pickle", "pkgutil", "platform",
    "plistlib", "poplib", "pprint", "profile", "queue", "quopri", "random", "re", "reprlib",
    "sched", "secrets", "selectors", "shelve", "shlex", "shutil", "smtplib", "socket",
    "socketserver", "statistics", "string", "subprocess", "tarfile", "tempfile", "textwrap",
    "threading", "timeit", "tokenize", "trace", "traceback", "turtle", "typing", "unittest.case",
    "urllib.parse", "urllib.request", "uuid", "warnings", "wave", "weakref", "webbrowser",
    "xml.dom.minidom", "zipfile",
]


def documents():
    for name in MODULES:
        try:
            mod = importlib.import_module(name)
        except Exception:
            continue
        doc = inspect.getdoc(mod)
        if doc:
            yield doc
        for attr in sorted(vars(mod)):
            obj = getattr(mod, attr)
            if getattr(obj, "__module__", None) != mod.__name__:
                continue
            if not (inspect.isclass(obj) or inspect.isfunction(obj)):
                continue
            doc = inspect.getdoc(obj)
            if doc and len(doc) > 80:
                yield doc


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).parents[1] / "src" / "fang" / "data"))
    args = ap.parse_args()
    docs = []
    seen = set()
    for doc in documents():
        text = doc.encode("ascii", "ignore").decode("ascii").strip()
        if text and text not in seen:
            seen.add(text)
            docs.append(text)
    cut = int(len(docs) * 0.9)
    out = Path(args.out)
    (out / "corpus_train.txt").write_text("\n\n".join(docs[:cut]) + "\n")
    (out / "corpus_eval.txt").write_text("\n\n".join(docs[cut:]) + "\n")
    print(f"{len(docs)} documents, {sum(map(len, docs))} characters")


if __name__ == "__main__":
    main()
