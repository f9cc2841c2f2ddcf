from __future__ import annotations

from hkfr.behavior_store import BehaviorEvent

T0 = 1_680_000_000  # 2023-03-28T10:40:00Z


def make_event(
    user_id: str = "u1",
    ts: int = T0,
    content_kind: str = "order",
    subject_kind: str = "product",
    subject_id: str = "p1",
    subject_name: str = "Kung Pao Chicken",
    category: str = "Sichuan",
    price_minor: int | None = 2550,
    scenario: str = "app_homepage",
    attributes: dict | None = None,
) -> BehaviorEvent:
    if subject_kind == "product" and content_kind == "order" and price_minor is None:
        price_minor = 1000
    return BehaviorEvent(
        user_id=user_id,
        subject_kind=subject_kind,
        subject_id=subject_id,
        subject_name=subject_name,
        category=category,
        price_minor=price_minor,
        content_kind=content_kind,
        scenario=scenario,
        timestamp=ts,
        attributes=attributes or {},
    )


class StubChatServer:
    """Local OpenAI-style endpoint replaying a scripted list of statuses."""

    def __init__(self, statuses, content="ok"):
        import http.server
        import json
        import threading

        self.statuses = list(statuses)
        self.requests = []
        stub = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length))
                stub.requests.append({"path": self.path, "headers": dict(self.headers), "body": body})
                status = stub.statuses.pop(0) if stub.statuses else 200
                if status == 200:
                    payload = {"choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]}
                else:
                    payload = {"error": {"message": f"status {status}"}}
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.02}, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_address[1]}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
