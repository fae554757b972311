import json
import os

from django.conf import settings


class RunManager:
    """Registry of training runs kept in a JSON file, not the database."""

    def __init__(self, file_path=None):
        self.file_path = str(file_path or settings.BRANCHING['RUN_INDEX'])
        self._ensure_file_exists()

    def _ensure_file_exists(self):
        if not os.path.exists(self.file_path):
            with open(self.file_path, 'w') as f:
                json.dump([], f)

    def _load_runs(self):
        try:
            with open(self.file_path, 'r') as f:
                return json.load(f)
        except (FileNotFoundError, json.JSONDecodeError):
            return []

    def _save_runs(self, runs):
        with open(self.file_path, 'w') as f:
            json.dump(runs, f, indent=2, default=str)

    def _get_next_id(self, runs):
        if not runs:
            return 1
        return max(run['id'] for run in runs) + 1

    def get_all(self):
        return self._load_runs()

    def get_by_id(self, run_id):
        for run in self._load_runs():
            if run['id'] == run_id:
                return run
        return None

    def get_by_out_dir(self, out_dir):
        out_dir = os.path.abspath(out_dir)
        for run in self._load_runs():
            if run['out_dir'] == out_dir:
                return run
        return None

    def create(self, run_data):
        runs = self._load_runs()
        run_data = {**run_data, 'id': self._get_next_id(runs)}
        runs.append(run_data)
        self._save_runs(runs)
        return run_data

    def update(self, run_id, run_data):
        runs = self._load_runs()
        for i, run in enumerate(runs):
            if run['id'] == run_id:
                runs[i] = {**run_data, 'id': run_id}
                self._save_runs(runs)
                return runs[i]
        return None

    def register(self, run_data):
        """Create the entry for ``run_data['out_dir']`` or refresh the existing one."""
        run_data = {**run_data, 'out_dir': os.path.abspath(run_data['out_dir'])}
        existing = self.get_by_out_dir(run_data['out_dir'])
        if existing:
            return self.update(existing['id'], run_data)
        return self.create(run_data)

    def delete(self, run_id):
        runs = self._load_runs()
        remaining = [run for run in runs if run['id'] != run_id]
        self._save_runs(remaining)
        return len(remaining) != len(runs)
