"""Prompt templates.

``FULL_PIPELINE`` and ``QUESTIONS_ONLY`` are the header-extraction /
question-generation prompts, kept word for word (including their quirks, such
as the unclosed brace in the questions-only output example). ``DESCRIPTION``
and ``DECOMPOSE`` were written for this package.

Templates are filled by plain string replacement of ``{table}`` or
``{question}``, never ``str.format``, so literal braces in the text stay as is.
"""

from __future__ import annotations

TABLE_SLOT = "{table}"
QUESTION_SLOT = "{question}"

FULL_PIPELINE = """\
You are an expert in table data analysis. Given a table with its file name, sheet name, and a portion of its content (first ten rows), your task is to **extract key headers and generate questions** based on the table & headers.

Important Considerations:
- The table may contain nan or Unnamed: values, which represent empty merged cells in the original table. These **should not** be considered as meaningful data points or headers.
- The **true column headers may not always be in the first row or first column**. Carefully analyze the table to identify the correct headers.
- If the table has **multi-level headers**, preserve the hierarchical structure without merging or altering the text.
- If the table has an **irregular header structure** (such as key-value formatted headers where column names are listed separately), extract the correct header names accordingly.
- **Ignore rows that contain mostly empty values (nan, Unnamed:) or placeholders without meaningful data.**
- **Do not generate python code, extract headers and questions on your own.**
- The type of Questions could be one of (lookup, calculate, visualize, reasoning).
- **Generate question using the language of the table.**

Tasks:
1. Extract Header Names:
   - Identify the **true headers** by analyzing the structure of the table.
   - **Exclude** placeholder values like "nan" and "Unnamed:".
   - If the table contains **multi-level headers**, keep them as separate levels without merging.
   - If the table has **key-value headers**, extract the correct column names.
2. Generate Questions (Context-Specific to the Table):
   - Formulate **questions that can only be answered using this specific table**.
   - Ensure **each question involves 1 to 3 different headers** to capture interactions between data & columns.
   - Ensure the header diversity in all the questions.
   - Use '' to mark the headers in the question.
   - **Total number of questions should larger than the half number of extracted headers**

**Output Format (Strictly JSON format)**
Only return a JSON dictionary object with the extracted headers and questions, without any additional explanations or formatting.
{ "headers": ["header1", "header2", "..."], "questions": ["question1", "question2", "..."] }

Input Table:
{table}"""

QUESTIONS_ONLY = """\
You are an expert in table data analysis. Given a table with its file name and a portion of its content (first ten rows), your task is to **generate questions** based on the table & headers.

Important Considerations:
- **Do not generate python code, generate questions on your own.**
- The type of Questions could be one of (Numerical, List, Count, Select).
- **Generate question using the language of the table.**

**Tasks:**
- **1. Generate Questions (Context-Specific to the Table):**
- Formulate **questions that can only be answered using this specific table**.
- Ensure **each question involves 1 to 3 different headers** to capture interactions between data & columns.
- Ensure the header diversity in all the questions.
- Use '' to mark the headers in the question.
- **Total number of questions should larger than the half number of extracted headers**

**Output Format (Strictly JSON format)**
Only return a JSON dictionary object with the extracted headers and questions, without any additional explanations or formatting.
{ "questions": ["question1", "question2","..."]

Input Table:
{table}"""

DESCRIPTION = """\
You are an expert in table data analysis. Given a table and a portion of its content, write a description of the table in 2 to 4 sentences of natural language. Say what the table is about and what its columns contain.

**Output Format (Strictly JSON format)**
Only return a JSON dictionary object with a single "description" field, without any additional explanations or formatting.
{ "description": "..." }

Input Table:
{table}"""

DECOMPOSE = """\
You are an expert in multi-table question answering. The question below may need information from several different tables. Decompose it into 2 to 3 sub-questions so that each sub-question can be answered using a single table.

**Output Format (Strictly JSON format)**
Only return a JSON dictionary object with the sub-questions, without any additional explanations or formatting.
{ "sub_queries": ["sub-question1", "sub-question2"] }

Question:
{question}"""


def fill_table(template: str, table_text: str) -> str:
    return template.replace(TABLE_SLOT, table_text)


def fill_question(template: str, question: str) -> str:
    return template.replace(QUESTION_SLOT, question)
