"""Prompt templates for every model-facing stage.

Kept in one place so tests and cassette tooling can build requests that
fingerprint identically to the pipeline's own.
"""

from .docparse import OptionEntry, ProgramDoc

SYSTEM_ANALYST = (
    "You are an expert in command-line software security testing. You analyze "
    "program documentation precisely and answer in the exact format requested."
)


def format_options(entries) -> str:
    lines = []
    for e in entries:
        lines.append(f"{', '.join(e.keys)}: {e.description}")
    return "\n".join(lines)


def split_keys_prompt(entry: OptionEntry) -> str:
    return (
        "The following documentation entry lists several option keys together. "
        "They may be aliases of one option or entirely distinct options.\n\n"
        f"Keys: {', '.join(entry.keys)}\n"
        f"Description: {entry.description}\n\n"
        "Please separate the options and create individual descriptions for each "
        "option based on the original description. Group keys that are aliases of "
        "the same option. Every input key must appear in exactly one group.\n"
        "Ensure that the output strictly conforms to JSON format standards, like:\n"
        '[{"keys": ["-a", "--alpha"], "description": "..."}, '
        '{"keys": ["--no-alpha"], "description": "..."}]'
    )


def extract_constraints_prompt(doc: ProgramDoc) -> str:
    return (
        f"Program: {doc.program_name}\n"
        f"Description: {doc.description}\n\n"
        f"Option descriptions:\n{format_options(doc.options)}\n\n"
        "Please find any options that are mutually exclusive or logically "
        "conflicting when selected together and find any options that have "
        "dependencies on other options.\n"
        "Ensure that the output strictly conforms to JSON format standards, like:\n"
        '{"conflicts": [{"options": ["-a", "-b"], "reason": "..."}], '
        '"dependencies": [{"option": "-a", "requires": ["-b"], "reason": "..."}]}'
    )


def self_check_prompt(verification: str, counterexample: str, option_context: str) -> str:
    return (
        "Consider the following command-line option descriptions:\n\n"
        f"{option_context}\n\n"
        "Answer the two questions below. Think carefully about what the "
        "documentation implies. Begin each answer with \"yes\" or \"no\", then "
        "give a short justification.\n"
        f"Question 1 (verification): {verification}\n"
        f"Question 2 (counterexample): {counterexample}\n\n"
        "Ensure that the output strictly conforms to JSON format standards, like:\n"
        '{"verification": "yes, because ...", "counterexample": "no, because ..."}'
    )


HIGH_RISK_DEFINITION = (
    "high-risk option combinations are options that, when used together, could "
    "lead to vulnerabilities in deep memory corruption while functioning correctly"
)

_PREDICT_JSON_SHAPE = (
    'Ensure that the final output strictly conforms to JSON format standards, like:\n'
    '{"combinations": [{"options": ["-a", "-b"], "facilitators": ["-v"], '
    '"rationale": "..."}]}\n'
    'where "options" are the options whose interaction may corrupt memory and '
    '"facilitators" are extra options that make the corruption easier to trigger.'
)


def predict_prompt(doc: ProgramDoc, constraint_text: str) -> str:
    return (
        f"Program: {doc.program_name}\n"
        f"Description: {doc.description}\n\n"
        f"Option descriptions:\n{format_options(doc.options)}\n\n"
        "Complete the following steps. Show your thought process for each step, "
        "because each step's output is context for the next.\n"
        "Step 1. Understand the program's core functionality from its name and "
        "description.\n"
        "Step 2. Analyze each option and its effects to understand what the "
        "options do.\n"
        "Step 3. Remember the previously extracted constraints between options; "
        "never output a combination that violates them:\n"
        f"{constraint_text or '(none)'}\n"
        "Step 4. Hypothetically, examine combinations of two or more options and "
        f"identify those that may pose vulnerabilities; {HIGH_RISK_DEFINITION}.\n"
        "Step 5. For each combination found, add any other options that could "
        "facilitate triggering the vulnerability.\n"
        "Step 6. Output the result in JSON format.\n"
        f"{_PREDICT_JSON_SHAPE}\n\n"
        "Let's take a deep breath and think step by step."
    )


def fewshot_example_prompt(doc: ProgramDoc, constraint_text: str,
                           historical: list[list[str]]) -> str:
    combos = "\n".join("  " + " ".join(c) for c in historical)
    return (
        f"Program: {doc.program_name}\n"
        f"Description: {doc.description}\n\n"
        f"Option descriptions:\n{format_options(doc.options)}\n\n"
        "Complete the following steps. Show your thought process for each step.\n"
        "Step 1. Understand the program's core functionality from its name and "
        "description.\n"
        "Step 2. Analyze each option and its effects.\n"
        "Step 3. Remember the constraints between options:\n"
        f"{constraint_text or '(none)'}\n"
        "Step 4. The following option combinations are known to have caused "
        "vulnerabilities in this program:\n"
        f"{combos}\n"
        "Hypothetically analyze why these combinations are susceptible to memory "
        "corruption, and summarize which kinds of combinations might lead to deep "
        "memory corruption vulnerabilities while appearing to function normally.\n"
        "Step 5. Explore options that could indirectly facilitate triggering the "
        "vulnerabilities.\n"
        "Step 6. Output the result in JSON format.\n"
        f"{_PREDICT_JSON_SHAPE}\n\n"
        "Let's take a deep breath and think step by step."
    )


def value_check_prompt(doc: ProgramDoc, options: list[str]) -> str:
    return (
        f"Program: {doc.program_name}\n"
        f"Synopsis: {doc.synopsis}\n\n"
        f"Option descriptions:\n{format_options(doc.options)}\n\n"
        f"Among these options: {' '.join(options)}\n"
        "determine which options require a value, cross-verifying with the "
        "synopsis.\n"
        "Ensure that the output strictly conforms to JSON format standards, like:\n"
        '{"value_options": ["-a", "-b"]}'
    )


def assemble_prompt(doc: ProgramDoc, options: list[str], value_options: list[str],
                    prefer_uncommon: bool = False) -> str:
    value_hint = (
        "Prefer less common but still valid values over the most typical ones."
        if prefer_uncommon
        else "Choose values a real user could plausibly pass."
    )
    return (
        f"Program: {doc.program_name}\n"
        f"Description: {doc.description}\n"
        f"Synopsis: {doc.synopsis}\n\n"
        f"Option descriptions:\n{format_options(doc.options)}\n\n"
        f"Assemble one executable command that uses all of these options: "
        f"{' '.join(options)}\n"
        "Follow every rule:\n"
        "1. Produce exactly one command. Never concatenate multiple commands "
        "with operators like \"&&\", \";\", or \"|\".\n"
        f"2. These options require values: {' '.join(value_options) or '(none)'}. "
        "Understand the command's intent and generate valid values for all of "
        f"them. {value_hint} For other placeholders, creatively assign "
        "hypothetical values.\n"
        "3. Represent the primary input file as \"file0\" and use sequential "
        "placeholders like \"file1\", \"file2\" for additional necessary files. "
        "\"file0\" must be used exclusively as the single mutated input; never "
        "reuse it.\n"
        "4. Review each file placeholder: declare its expected file format and "
        "its role (input, config, output, or aux). Do not declare placeholders "
        "that the command does not use.\n"
        "Ensure that the output strictly conforms to JSON format standards, like:\n"
        '{"argv": ["prog", "-a", "5", "file0"], "values": {"-a": "5"}, '
        '"placeholders": [{"name": "file0", "format": "PNG image", '
        '"role": "input"}], "notes": "..."}\n'
        "The argv array must start with the program name and list every token "
        "separately."
    )


def filegen_prompt(argv: list[str], placeholders, values: dict) -> str:
    ph_lines = "\n".join(
        f"  {p.name}: expected format {p.expected_format or 'unknown'} (role: {p.role})"
        for p in placeholders
    )
    return (
        f"Command under test: {' '.join(argv)}\n"
        f"Assigned option values: {values}\n"
        f"File placeholders to create:\n{ph_lines}\n\n"
        "Write one Python script that generates every file above. Rules:\n"
        "1. Identify each placeholder's expected format and generate a file that "
        "genuinely conforms to it. Leverage third-party libraries to generate "
        "files with complex formats.\n"
        "2. Respect the semantic constraints the option values impose on file "
        "content (dimensions, codecs, byte ranges, referenced names).\n"
        "3. The size of file0 should ideally remain under 1KB while still "
        "exercising as much program behavior as possible.\n"
        "4. Replace all placeholders in the code with concrete content you deem "
        "appropriate. Never leave stubs such as \"your ... file\" or "
        "\"path/to/...\".\n"
        "5. Save every file in the current working directory under exactly the "
        "placeholder names given above.\n"
        "Output only the Python code, in a single ```python code block."
    )


def filegen_retry_prompt(previous_script: str, offending: list[str]) -> str:
    return (
        "The previous script still contained template placeholders that block "
        f"automated execution: {offending}.\n"
        "Rewrite the script and replace every placeholder with concrete content. "
        "Output only the corrected Python code, in a single ```python code "
        "block.\n\nPrevious script:\n```python\n" + previous_script + "\n```"
    )


KNOWLEDGE_CONTEXT = (
    "For software testers who do not understand security, they hope to have "
    "easy-to-understand knowledge to conduct efficient security testing."
)


def summarize_program_prompt(program: str, step4_texts: list[str]) -> str:
    joined = "\n---\n".join(step4_texts)
    return (
        f"The following are risk analyses of option combinations for the program "
        f"{program}:\n\n{joined}\n\n"
        "Please summarize the knowledge of the categories of program option "
        "combinations that may have potential vulnerabilities. Answer with a "
        "short list of categories, one per line."
    )


def synthesize_knowledge_prompt(per_program_summaries: dict[str, str]) -> str:
    blocks = "\n\n".join(f"[{p}]\n{s}" for p, s in sorted(per_program_summaries.items()))
    return (
        f"{KNOWLEDGE_CONTEXT}\n\n"
        "Below are per-program summaries of option-combination risk categories:\n\n"
        f"{blocks}\n\n"
        "Synthesize these summaries into general knowledge and rank the "
        "categories from most to least common.\n"
        "Ensure that the output strictly conforms to JSON format standards, like:\n"
        '{"ranking": [{"category": "...", "description": "..."}]}'
    )
