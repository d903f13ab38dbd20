"""Generate the bundled sample corpus.

The output is deterministic for a given seed. Each document is wrapped in
archive-style start/end markers so the cleaning stage has something to strip.
"""
import json
import random
import textwrap
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "sample-corpus"

WOMEN = ["Elinor Ward", "Catherine Hale", "Harriet Fenwick", "Margaret Ashby",
         "Lucy Steele", "Anne Lyle", "Julia Fairfax", "Emma Thorne"]
MEN = ["Edward Ferrars", "Henry Tilney", "John Thornton", "Charles Musgrove",
       "Frederick Wentworth", "George Knightley", "Arthur Graham", "William Price"]
PLACES = ["Netherfield", "Hartfield", "Milton", "Thornfield", "Bath",
          "the parsonage", "the village", "London", "Kellynch Hall"]
RELATIONS = ["mother", "father", "sister", "brother", "aunt", "uncle", "cousin",
             "daughter", "son", "grandmother"]
FEELINGS = ["grief", "joy", "anxiety", "tenderness", "resentment", "shame",
            "hope", "sorrow", "pride", "affection"]
WEALTH = ["fortune", "estate", "income", "inheritance", "property", "debts",
          "ten thousand a year", "a small annuity"]
SOCIETY = ["the neighbourhood", "good society", "the assembly", "the ball",
           "the whole town", "polite company", "the drawing-room"]
DUTY = ["duty", "obligation", "principle", "conscience", "honour", "promise"]
CLASS = ["rank", "station", "birth", "connexions", "gentility", "the lower orders"]
SCANDAL = ["the elopement", "the rumour", "the disgrace", "the secret engagement",
           "the gossip", "the impropriety"]

TEMPLATES = [
    "Miss {w} was the {rel} of a gentleman whose {wealth} was spoken of in {soc}.",
    "Mr. {m} had long admired her, though his {cls} forbade him to declare it.",
    "\"I cannot think it right,\" said she, \"to marry without {duty} and affection.\"",
    "Her {rel} observed that a woman of her {cls} ought to consider the {wealth} of any suitor.",
    "The news of {scan} spread through {soc} before the evening was over.",
    "Mrs. {w2} declared that she had never known such {feel} in all her life.",
    "He walked to {place} in the rain, thinking only of her and of his {duty}.",
    "She felt a {feel} she could not name, and wept alone in her room.",
    "\"You must not speak of love to me,\" she cried, \"when my {rel} is so ill.\"",
    "The marriage was settled at last, and the whole family rejoiced at the match.",
    "Her husband was a man of great {wealth}, but of little sense and less kindness.",
    "It was his {duty} as a son to obey his father, whatever his own wishes might be.",
    "At the ball, every eye in {soc} turned toward the young lady in white.",
    "Dr. {m2} called at {place} twice that week, and each time stayed to dinner.",
    "The girl said nothing, but her {feel} was plain to everyone who loved her.",
    "His wife had brought him no {wealth}, yet he loved her the more for it.",
    "A single man of good {wealth} must be in want of a wife, or so {soc} believed.",
    "They were married in the spring, in the little church at {place}.",
    "Her {rel} would hear nothing of {scan}, and forbade the name to be mentioned.",
    "Mr. {m} and his {rel} dined at {place} with the rest of {soc}.",
    "The young man confessed his love, and she accepted him with {feel} and gratitude.",
    "No lady of her {cls} could walk alone to {place} without remark.",
    "Poverty is a hard master, and her {rel} had felt its weight for many years.",
    "She owed it to her family to think of {duty} before her own happiness.",
    "The gentlemen talked of horses and of the {wealth} of their neighbours.",
    "Even the servants whispered of {scan} when they thought no one could hear.",
    "The sisters sat together by the fire and spoke of their mother with {feel}.",
    "He was proud of his {cls}, and she was proud of her independence.",
    "St. {place2} was a quiet place, and its people cared greatly for {cls}.",
    "Every daughter must marry, her mother said, and the sooner the better.",
]

TITLES = [
    ("sense-and-station", "Sense and Station", "A. Ward", "train"),
    ("the-parsonage", "The Parsonage", "C. Hale", "train"),
    ("milton-mills", "Milton Mills", "E. Gaskill", "train"),
    ("a-winter-at-bath", "A Winter at Bath", "M. Ashby", "train"),
    ("the-heiress", "The Heiress", "F. Burnley", "train"),
    ("kellynch", "Kellynch", "S. Ferris", "train"),
    ("the-governess", "The Governess", "J. Kavan", "eval"),
]


def sentence(rng):
    t = rng.choice(TEMPLATES)
    return t.format(
        w=rng.choice(WOMEN), w2=rng.choice(WOMEN).split()[1], m=rng.choice(MEN),
        m2=rng.choice(MEN).split()[1], rel=rng.choice(RELATIONS),
        wealth=rng.choice(WEALTH), soc=rng.choice(SOCIETY), duty=rng.choice(DUTY),
        cls=rng.choice(CLASS), scan=rng.choice(SCANDAL), feel=rng.choice(FEELINGS),
        place=rng.choice(PLACES), place2=rng.choice(["Mary's", "Clement's", "Ives"]),
    )


def document(rng, title, author, chapters):
    body = []
    for c in range(1, chapters + 1):
        body.append(f"CHAPTER {roman(c)}.")
        for _ in range(rng.randint(5, 8)):
            para = " ".join(sentence(rng) for _ in range(rng.randint(2, 5)))
            body.append(textwrap.fill(para, width=70))
    header = (f"The Project Gutenberg eBook of {title}\r\n\r\n"
              f"Title: {title}\r\nAuthor: {author}\r\n\r\n"
              f"*** START OF THE PROJECT GUTENBERG EBOOK {title.upper()} ***\r\n\r\n\r\n")
    footer = (f"\r\n\r\n*** END OF THE PROJECT GUTENBERG EBOOK {title.upper()} ***\r\n"
              "\r\nUpdated editions will replace the previous one.\r\n")
    return header + "\r\n\r\n".join(b.replace("\n", "\r\n") for b in body) + footer


def roman(n):
    vals = [(10, "X"), (9, "IX"), (5, "V"), (4, "IV"), (1, "I")]
    out = ""
    for v, s in vals:
        while n >= v:
            out += s
            n -= v
    return out


def main():
    rng = random.Random(1813)
    OUT.mkdir(parents=True, exist_ok=True)
    manifest = []
    for doc_id, title, author, role in TITLES:
        text = document(rng, title, author, chapters=4)
        fname = f"{doc_id}.txt"
        (OUT / fname).write_bytes(text.encode("utf-8"))
        manifest.append({"id": doc_id, "title": title, "author": author,
                         "filename": fname, "split": role})
    (OUT / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


if __name__ == "__main__":
    main()
