#!/usr/bin/env python3
"""Brute-force chrF++ oracle used to freeze golden test values.

Enumerates every character n-gram (whitespace removed) and word n-gram
(whitespace split) by slicing, clips matches with list removal, and
averages per-order F-beta over orders where either side has n-grams.
Deliberately shares no code with the Rust implementation.
"""
import sys

EPS = 1e-16


def char_grams(text, n, strip=True):
    s = "".join(text.split()) if strip else text
    return [s[i:i + n] for i in range(len(s) - n + 1)]


def word_grams(text, n):
    w = text.split()
    return [" ".join(w[i:i + n]) for i in range(len(w) - n + 1)]


def clipped_matches(hyp, ref):
    pool = list(ref)
    m = 0
    for g in hyp:
        if g in pool:
            pool.remove(g)
            m += 1
    return m


def order_stats(pairs, char_n=6, word_n=2):
    stats = []
    for n in range(1, char_n + 1):
        th = tr = tm = 0
        for h, r in pairs:
            hg, rg = char_grams(h, n), char_grams(r, n)
            th += len(hg); tr += len(rg); tm += clipped_matches(hg, rg)
        stats.append((th, tr, tm))
    for n in range(1, word_n + 1):
        th = tr = tm = 0
        for h, r in pairs:
            hg, rg = word_grams(h, n), word_grams(r, n)
            th += len(hg); tr += len(rg); tm += clipped_matches(hg, rg)
        stats.append((th, tr, tm))
    return stats


def fscore(stats, beta=2.0):
    b2 = beta * beta
    total = 0.0
    used = 0
    for th, tr, tm in stats:
        if th == 0 and tr == 0:
            continue
        used += 1
        p = tm / th if th > 0 else EPS
        r = tm / tr if tr > 0 else EPS
        d = b2 * p + r
        total += (1 + b2) * p * r / d if d > 0 else EPS
    return total / used if used else 0.0


def chrf(h, r):
    return fscore(order_stats([(h, r)]))


def corpus(pairs):
    return fscore(order_stats(pairs))


SENTENCE_PAIRS = [
    ("ab", "abc"),
    ("cat", "cat"),
    ("", "cat"),
    ("a", "b"),
    ("a", "a"),
    ("ab", "ba"),
    ("abcd", "abdc"),
    ("aab", "abb"),
    ("abab", "baba"),
    ("a b", "a b"),
    ("a b", "b a"),
    ("ab cd", "ab dc"),
    ("abc", "ab"),
    ("aaaa", "aa"),
    ("dcba", "abcd"),
    ("ab ab", "ab"),
    ("a bc d", "a bcd"),
    ("cab", "abc"),
    ("dd c", "d dc"),
    ("abcabc", "cabcab"),
    ("b", ""),
    ("ba dc", "ab cd"),
    ("شو بدك", "شو بدك تعمل"),
    ("واش كاين شي", "واش كاين"),
    ("وش تبغى", "ايش تبي"),
]

CORPUS_SETS = [
    [("ab", "abc"), ("cd", "cd")],
    [("a b", "a c"), ("dcba", "abcd")],
    [("", "cat"), ("cat", "cat")],
]

if __name__ == "__main__":
    for h, r in SENTENCE_PAIRS:
        print(f'({h!r}, {r!r}, {chrf(h, r)!r}),')
    print()
    for pairs in CORPUS_SETS:
        print(pairs, repr(corpus(pairs)))
