import time

import pytest

from deskgrid import gateway as gwclient
from deskgrid.errors import ConflictError, NotFoundError, ValidationError
from deskgrid.gateway import Gateway, GatewayConfig
from deskgrid.harness import wait_for
from deskgrid.model import ThreadState
from deskgrid.wire import JobSpec, NamedBlob, TaskSubmission


@pytest.fixture
def grid(make_cluster, tmp_path):
    cluster = make_cluster(executors=1, slots=2)
    gw = Gateway(GatewayConfig(
        manager_address=cluster.address,
        store_path=str(tmp_path / "gateway.journal"),
    )).start()
    yield cluster, gw
    gw.stop()


def _wait_done(gw_address: str, task_id: str, timeout: float = 20.0):
    def done():
        return all(j.state.terminal
                   for j in gwclient.task_status(gw_address, task_id).jobs)
    wait_for(done, timeout=timeout, what=f"task {task_id} to finish")
    return gwclient.task_status(gw_address, task_id)


SCRIPT = b"""\
import pathlib, sys
text = pathlib.Path("words.txt").read_text()
pathlib.Path("out.txt").write_text(text.upper())
sys.stdout.write("done %s" % sys.argv[1])
"""


def test_job_round_trip_with_files(grid):
    cluster, gw = grid
    task_id = gwclient.submit_jobs(gw.address, "alice", [JobSpec(
        job_name="upcase",
        program="run.py",
        args=("one",),
        input_files=(NamedBlob(name="run.py", data=SCRIPT),
                     NamedBlob(name="words.txt", data=b"hello grid")),
        expected_outputs=("out.txt",),
    )])
    status = _wait_done(gw.address, task_id)
    (job,) = status.jobs
    assert job.state is ThreadState.COMPLETED
    assert job.exit_code == 0 and job.outputs_ready

    result = gwclient.job_result(gw.address, task_id, "upcase")
    assert result.exit_code == 0
    assert result.stdout == b"done one"
    outputs = {blob.name: blob.data for blob in result.output_files}
    assert outputs == {"out.txt": b"HELLO GRID"}


def test_failing_job_reports_exit_code(grid):
    cluster, gw = grid
    task_id = gwclient.submit_jobs(gw.address, "alice", [JobSpec(
        job_name="boom",
        program="bad.py",
        input_files=(NamedBlob(name="bad.py",
                               data=b"import sys; sys.stderr.write('no'); sys.exit(7)"),),
    )])
    status = _wait_done(gw.address, task_id)
    (job,) = status.jobs
    assert job.state is ThreadState.FAILED
    assert job.exit_code == 7
    assert not job.outputs_ready
    with pytest.raises(ConflictError, match="failed"):
        gwclient.job_result(gw.address, task_id, "boom")


def test_result_before_finish_is_a_conflict(grid):
    cluster, gw = grid
    task_id = gwclient.submit_jobs(gw.address, "alice", [JobSpec(
        job_name="slow",
        program="s.py",
        input_files=(NamedBlob(name="s.py",
                               data=b"import time; time.sleep(1.2)"),),
    )])
    with pytest.raises(ConflictError, match="not finished"):
        gw.job_result(task_id, "slow")
    _wait_done(gw.address, task_id)


def test_multiple_jobs_ordered_status(grid):
    cluster, gw = grid
    jobs = [JobSpec(
        job_name=f"j{i}",
        program="p.py",
        args=(str(i),),
        input_files=(NamedBlob(name="p.py",
                               data=b"import sys; print(int(sys.argv[1]) * 3)"),),
    ) for i in (2, 0, 1)]
    task_id = gwclient.submit_jobs(gw.address, "bob", jobs)
    status = _wait_done(gw.address, task_id)
    assert [j.job_name for j in status.jobs] == ["j0", "j1", "j2"]
    for i in (0, 1, 2):
        result = gwclient.job_result(gw.address, task_id, f"j{i}")
        assert result.stdout.strip() == str(i * 3).encode()


def test_submission_validation(grid):
    cluster, gw = grid
    with pytest.raises(ValidationError):
        gw.submit_task(TaskSubmission(submitted_by="x", jobs=()))
    dup = JobSpec(job_name="same", program="p",
                  input_files=(NamedBlob(name="p", data=b"#"),))
    with pytest.raises(ValidationError, match="unique"):
        gw.submit_task(TaskSubmission(submitted_by="x", jobs=(dup, dup)))
    with pytest.raises(ValidationError):
        gw.submit_task(TaskSubmission(submitted_by="", jobs=(dup,)))


def test_unknown_task_and_job(grid):
    cluster, gw = grid
    with pytest.raises(NotFoundError):
        gwclient.task_status(gw.address, "nope")
    task_id = gwclient.submit_jobs(gw.address, "alice", [JobSpec(
        job_name="a", program="p.py",
        input_files=(NamedBlob(name="p.py", data=b"pass"),),
    )])
    with pytest.raises(NotFoundError):
        gwclient.job_result(gw.address, task_id, "zzz")
    _wait_done(gw.address, task_id)


def test_gateway_restart_keeps_task_mappings(make_cluster, tmp_path):
    cluster = make_cluster(executors=1)
    store = str(tmp_path / "gw.journal")
    gw = Gateway(GatewayConfig(manager_address=cluster.address,
                               store_path=store)).start()
    task_id = gwclient.submit_jobs(gw.address, "carol", [JobSpec(
        job_name="only", program="p.py",
        input_files=(NamedBlob(name="p.py", data=b"print('hi')"),),
    )])
    _wait_done(gw.address, task_id)
    gw.stop()

    reopened = Gateway(GatewayConfig(manager_address=cluster.address,
                                     store_path=store)).start()
    try:
        status = gwclient.task_status(reopened.address, task_id)
        assert status.jobs[0].state is ThreadState.COMPLETED
        result = gwclient.job_result(reopened.address, task_id, "only")
        assert result.stdout.strip() == b"hi"
    finally:
        reopened.stop()
