"""Walk one user's preference graph from JSON-LD to a training example.

Run: python3 demos/pkg_to_prompt.py
"""

import json

from fedtrek.pkg_store import EntityRef, PersonalKnowledgeGraph, PreferenceTriple, add_preference, from_jsonld, \
    query_subpkg, to_jsonld
from fedtrek.prompt_codec import PromptSpec, format_completion, parse_completion, render_prompt

zodiac = EntityRef("urn:movie:zodiac", "Zodiac (2007)", "movie")
seven = EntityRef("urn:movie:se7en", "Se7en (1995)", "movie")
clue = EntityRef("urn:movie:clue", "Clue (1985)", "movie")
pancakes = EntityRef("urn:recipe:pancakes", "Buttermilk pancakes", "recipe")

pkg = PersonalKnowledgeGraph("u42")
for i, (rel, ent) in enumerate([("liked", zodiac), ("disliked", clue), ("liked", pancakes)]):
    pkg, _ = add_preference(pkg, PreferenceTriple("u42", rel, ent, i))

# stating the same preference twice is flagged rather than stored twice
pkg, redundant = add_preference(pkg, PreferenceTriple("u42", "liked", zodiac, 5))
print("repeat flagged as redundant:", redundant)

doc = to_jsonld(pkg)
print(json.dumps(doc, indent=2), "\n")
assert from_jsonld(json.dumps(doc)) == pkg

# only movies go into a movie prompt
sub = query_subpkg(pkg, "movie")
prompt = render_prompt(PromptSpec.for_domain("movie", sub, [("user", "Something dark, please.")]))
completion = format_completion([seven.label])
print(prompt[-400:])
print("\ncompletion:\n" + completion)
print("parsed back:", parse_completion(completion))
