"""Shared test doubles: scriptable providers and small docs."""

from prophet.docparse import OptionEntry, ProgramDoc
from prophet.gateway import Completion, LlmGateway, Provider


class StubProvider(Provider):
    """Provider driven either by a response queue or a handler function.

    A queued element is a list of texts (one per sample) or a single text
    used for every sample of that request. A handler receives the request
    and returns the same shapes.
    """

    name = "stub"

    def __init__(self, responses=None, handler=None, usage=(10, 10)):
        self.queue = list(responses or [])
        self.handler = handler
        self.usage = usage
        self.requests = []

    def complete(self, req):
        self.requests.append(req)
        if self.handler is not None:
            texts = self.handler(req)
        elif self.queue:
            texts = self.queue.pop(0)
        else:
            raise AssertionError(f"StubProvider exhausted for {req.digest()!r}")
        if isinstance(texts, str):
            texts = [texts] * req.n_samples
        return [
            Completion(text=t, prompt_tokens=self.usage[0], completion_tokens=self.usage[1],
                       provider_id="stub")
            for t in texts
        ]


def stub_gateway(responses=None, handler=None):
    return LlmGateway(StubProvider(responses=responses, handler=handler))


def tiny_doc(entries, name="toy", synopsis="toy [options] file") -> ProgramDoc:
    """Build a ProgramDoc from (keys, description, takes_value) tuples."""
    options = tuple(
        OptionEntry(tuple(keys), desc, takes)
        for keys, desc, takes in entries
    )
    return ProgramDoc(
        program_name=name,
        description=f"{name} processes files",
        synopsis=synopsis,
        options=options,
    )
