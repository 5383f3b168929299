"""Prompt templates for the three enrichment steps.

Bump PROMPT_VERSION whenever a template changes; it is part of every cache
key, so old responses are never reused for new wording.
"""

PROMPT_VERSION = "v1"

# Every template starts with a task tag and carries its inputs on single
# "Field: value" lines so responses can be audited (and mocked) per step.

DIRECT = """[task: direct]
You are a news editor. Write one engaging, informative headline for the article below.
Keep the original meaning and do not invent facts. Reply with the headline only, on one line.

Category: {category}
Title: {title}
Abstract: {abstract}
"""

EXPLORE = """[task: explore]
List the named entities (people, organisations, places, events, works) most relevant to the
article below, including closely related ones you know about. One entity per line, at most
{max_entities} lines, no numbering and no commentary.

Category: {category}
Title: {title}
Abstract: {abstract}
"""

REFINE = """[task: refine]
Rewrite the candidate headline so it is specific, engaging and faithful to the original title.
Use the listed entities where they help. At most {max_tokens} words. Reply with the headline only.

Original title: {title}
Candidate title: {candidate}
Entities: {entities}
"""


def one_line(text: str) -> str:
    return " ".join(str(text).split())


def direct(news) -> str:
    return DIRECT.format(category=one_line(news.category), title=one_line(news.title), abstract=one_line(news.abstract))


def explore(news, max_entities: int) -> str:
    return EXPLORE.format(
        category=one_line(news.category),
        title=one_line(news.title),
        abstract=one_line(news.abstract),
        max_entities=max_entities,
    )


def refine(news, candidate: str, entity_names, max_tokens: int) -> str:
    return REFINE.format(
        title=one_line(news.title),
        candidate=one_line(candidate),
        entities=one_line(", ".join(entity_names)),
        max_tokens=max_tokens,
    )


def parse_fields(prompt: str) -> dict:
    """Recover the task tag and ``Field: value`` lines from a rendered prompt."""
    fields = {}
    for line in prompt.splitlines():
        if line.startswith("[task:") and line.endswith("]"):
            fields["task"] = line[len("[task:") : -1].strip()
        elif ": " in line or line.endswith(":"):
            key, _, value = line.partition(":")
            if key in ("Category", "Title", "Abstract", "Original title", "Candidate title", "Entities"):
                fields[key] = value.strip()
    return fields
