import threading

from cdn_provider import CdnController
from domain_model import AccessInfo, RedirectTarget, Region, SurrogateRegistration

QUEBEC = Region(id="quebec")
DECISIONS = 12_000
SURROGATES = 300


class SnapshotController(CdnController):
    """Pairs every redirect decision with the ready set the controller held when it decided."""

    def redirect_with_ready_set(self, region, content_id):
        with self._lock:
            ready = {s.surrogate_id for s in self.list_surrogates() if s.ready}
            return self.redirect_request(region, content_id), ready


def _registration(n):
    return SurrogateRegistration(
        surrogate_id=f"s-{n:04d}",
        region=QUEBEC,
        control_access=AccessInfo.local("127.0.0.1", 20000 + 2 * n),
        data_access=AccessInfo.local("127.0.0.1", 20001 + 2 * n),
    )


def test_no_redirect_to_a_surrogate_before_it_reports_ready():
    controller = SnapshotController(AccessInfo.local("127.0.0.1", 8081), default_contents=["c1"])
    notified = set()
    unready_choices = []
    premature_ready = []
    decisions = []
    done = threading.Event()

    def registrar():
        for n in range(SURROGATES):
            registration = _registration(n)
            controller.register_surrogate(registration)
            notified.add(registration.surrogate_id)
            controller.notify_ready(registration.surrogate_id)
        done.set()

    def redirector():
        for _ in range(DECISIONS):
            decision, ready = controller.redirect_with_ready_set(QUEBEC, "c1")
            decisions.append(decision)
            if decision.target_kind == RedirectTarget.SURROGATE and decision.surrogate_id not in ready:
                unready_choices.append(decision.surrogate_id)
            premature_ready.extend(sorted(ready - notified))

    threads = [threading.Thread(target=registrar), threading.Thread(target=redirector)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join(timeout=60)

    assert done.is_set()
    assert len(decisions) == DECISIONS
    assert unready_choices == []
    assert premature_ready == []
    assert all(s.ready for s in controller.list_surrogates())


def test_ready_set_is_read_from_controller_state():
    controller = SnapshotController(AccessInfo.local("127.0.0.1", 8081), default_contents=["c1"])
    controller.register_surrogate(_registration(0))
    decision, ready = controller.redirect_with_ready_set(QUEBEC, "c1")
    assert ready == set()
    assert decision.target_kind == RedirectTarget.ORIGIN

    controller.notify_ready("s-0000")
    decision, ready = controller.redirect_with_ready_set(QUEBEC, "c1")
    assert ready == {"s-0000"}
    assert decision.surrogate_id == "s-0000"


def test_registered_but_unready_surrogates_get_nothing():
    controller = CdnController(AccessInfo.local("127.0.0.1", 8081), default_contents=["c1"])
    for n in range(5):
        controller.register_surrogate(_registration(n))
    kinds = {controller.redirect_request(QUEBEC, "c1").target_kind for _ in range(1000)}
    assert kinds == {RedirectTarget.ORIGIN}
