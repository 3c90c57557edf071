"""Exercise the remote backend against a throwaway local HTTP stub.

The stub speaks just enough of the chat-completions protocol to answer
POST /v1/chat/completions. It fails twice with 429 before succeeding,
so the retry loop, the jittered backoff, and the attempt counter are
all visible. Injecting `sleep` keeps the demo instant.
"""

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from xraycot import (
    BackendConfig,
    GenerationRequest,
    parse_report,
    remote_generate,
)

REPORT = """\
== PRIMARY DIAGNOSIS ==
pneumonia
== REASONING ==
Focal consolidation in the right lower lobe.
== VISUAL CONCEPTS ==
- a focal opacity in the right lower lobe
== SEVERITY ==
mild
== RECOMMENDATIONS ==
Targeted antibiotics and short-interval follow-up imaging.
"""


class Stub(BaseHTTPRequestHandler):
    remaining_failures = 2

    def do_POST(self):
        body = self.rfile.read(int(self.headers["Content-Length"]))
        print(f"  stub got POST {self.path} model={json.loads(body)['model']}")
        if Stub.remaining_failures > 0:
            Stub.remaining_failures -= 1
            self.send_response(429)
            self.end_headers()
            return
        payload = json.dumps({"choices": [{"message": {"content": REPORT}}]})
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload.encode())

    def log_message(self, *args):
        pass  # keep stdout for the narrative


logging.disable(logging.WARNING)
server = ThreadingHTTPServer(("127.0.0.1", 0), Stub)
threading.Thread(target=server.serve_forever, daemon=True).start()
base = f"http://127.0.0.1:{server.server_port}"
print(f"stub listening at {base}, failing the next {Stub.remaining_failures} requests\n")

config = BackendConfig(kind="remote", base_url=base, model="demo-model")
request = GenerationRequest(
    messages=(
        ("system", "You are a radiology assistant."),
        ("user", "Describe the study and report in the canonical format."),
    )
)
delays: list[float] = []
result = remote_generate(request, config, sleep=delays.append)
server.shutdown()

print(f"succeeded on attempt {result.attempts} via {result.backend_tag}")
print("backoff delays that would have been slept:", [round(d, 3) for d in delays])

trace, report = parse_report(result.text)
print("\nparsed diagnosis:", report.diagnosis_label.value)
print("severity:", report.severity.value)
print("concepts:", list(report.observed_concepts))
