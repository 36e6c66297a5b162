"""Ask the campaign's LLM endpoint about a crash; the answer is only logged."""

import json
import os
import sys
import urllib.request

base = os.environ["OSS_CRS_LLM_API_URL"].rstrip("/")
headers = {"Authorization": f"Bearer {os.environ['OSS_CRS_LLM_API_KEY']}", "Content-Type": "application/json"}
with urllib.request.urlopen(urllib.request.Request(base + "/models", headers=headers), timeout=30) as resp:
    model = json.load(resp)["data"][0]["id"]
with open(sys.argv[1], "rb") as fh:
    crash = fh.read()[:200]
body = json.dumps({"model": model, "messages": [
    {"role": "user", "content": f"Suggest a fix for a crash on input {crash!r}"}]}).encode()
req = urllib.request.Request(base + "/chat/completions", data=body, headers=headers, method="POST")
with urllib.request.urlopen(req, timeout=120) as resp:
    answer = json.load(resp)
print("llm:", answer["choices"][0]["message"]["content"][:200])
