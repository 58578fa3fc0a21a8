import ast, os, sys
roots = {"/usr/lib/python3.10":"PSF", "/usr/local/lib/python3.10/dist-packages/numpy":"BSD-3-Clause", "/usr/local/lib/python3.10/dist-packages/scipy":"BSD-3-Clause"}
docs=[]
for root in roots:
    for dp, dn, fn in sorted(os.walk(root)):
        dn.sort()
        if "test" in dp or "site-packages" in dp or "dist-packages" in dp and root.startswith("/usr/lib"): continue
        for f in sorted(fn):
            if not f.endswith(".py"): continue
            try: tree = ast.parse(open(os.path.join(dp,f),encoding="utf-8").read())
            except Exception: continue
            for node in ast.walk(tree):
                if isinstance(node,(ast.Module,ast.FunctionDef,ast.ClassDef,ast.AsyncFunctionDef)):
                    d = ast.get_docstring(node)
                    if d and len(d) > 300 and "<|" not in d:
                        docs.append(d.strip())
    print(root, len(docs), sum(map(len,docs)))
from pydoc_data.topics import topics
for k in sorted(topics):
    t = topics[k].strip()
    if len(t) > 300 and "<|" not in t:
        docs.append(t)
print("total", len(docs), sum(map(len,docs)))
import random
random.Random(7).shuffle(docs)
out=[]; total=0
for d in docs:
    if total > 6_000_000: break
    out.append(d); total += len(d)+1
os.makedirs("/root/crate/data", exist_ok=True)
with open("/root/crate/data/corpus.txt","w",encoding="utf-8") as fh:
    fh.write("\n<|endoftext|>\n".join(out)); fh.write("\n")
print(len(out), total)
