#!/usr/bin/env python
import argparse
import logging
import os
import sqlite3
import sys

log = logging.getLogger(__name__)


class RunStore:
    """
    Registry of runs in an output directory, kept in {out_dir}/vipamin.db.
    """
    def __init__(self, out_dir):
        if not os.path.exists(out_dir):
            os.makedirs(out_dir)
        self.db_filepath = os.path.join(out_dir, "vipamin.db")
        log.debug("Db filepath is %s", self.db_filepath)
        create_db = not os.path.exists(self.db_filepath)
        self._conn = sqlite3.connect(self.db_filepath)
        if create_db:
            self._create_db()

    def _create_db(self):
        log.info("Creating db")
        c = self._conn.cursor()
        c.execute("""
            create table runs (run_id primary key, command, status, path, active, created, last_update);
        """)
        self._conn.commit()

    def __contains__(self, run_id):
        """
        Returns True if there is an active record for the run id.
        """
        return self.contains(run_id, True)

    def contains(self, run_id, active=None):
        """
        Returns True if there is a record for the run id.
        """
        c = self._conn.cursor()
        if active is None:
            c.execute("""
                select run_id from runs where run_id=?
            """, (run_id,))
        else:
            c.execute("""
                select run_id from runs where run_id=? and active=?
            """, (run_id, 1 if active else 0))
        return c.fetchone() is not None

    def __getitem__(self, run_id):
        """
        Returns run_id, command, status, path, active, created, last_update for run id.
        """
        c = self._conn.cursor()
        c.execute("""
            select run_id, command, status, path, active, created, last_update from runs where run_id=?
        """, (run_id,))
        row = c.fetchone()
        if not row:
            raise KeyError(run_id)
        return row

    def __delitem__(self, run_id):
        """
        Marks a run as inactive, freeing its run id.
        """
        c = self._conn.cursor()
        c.execute("""
            update runs set active=0 where run_id=?
        """, (run_id,))
        self._conn.commit()

    def add(self, run_id, command, path, status="running"):
        """
        Adds a run, or reactivates an inactive one.
        """
        c = self._conn.cursor()
        if self.contains(run_id):
            log.info("Updating %s", run_id)
            c.execute("""
                update runs set active=1, command=?, path=?, status=?, created=CURRENT_TIMESTAMP,
                last_update=CURRENT_TIMESTAMP where run_id=?
            """, (command, path, status, run_id))
        else:
            log.info("Adding %s", run_id)
            c.execute("""
                insert into runs (run_id, command, status, path, active, created, last_update)
                values (?, ?, ?, ?, 1, CURRENT_TIMESTAMP, CURRENT_TIMESTAMP)
            """, (run_id, command, status, path))
        self._conn.commit()

    def touch(self, run_id, status=None):
        """
        Set last update (and optionally status) for run id.
        """
        c = self._conn.cursor()
        if status is None:
            c.execute("""
                update runs set last_update=CURRENT_TIMESTAMP where run_id=? and active=1
            """, (run_id,))
        else:
            c.execute("""
                update runs set status=?, last_update=CURRENT_TIMESTAMP where run_id=? and active=1
            """, (status, run_id))
        self._conn.commit()

    def __iter__(self):
        c = self._conn.cursor()
        c.execute("""
            select run_id, command, status, path, active, created, last_update from runs order by created, run_id
        """)
        return iter(c.fetchall())

    def delete_all(self):
        c = self._conn.cursor()
        c.execute("""
            update runs set active=0
        """)
        self._conn.commit()

    # Methods to make this a Context Manager. This is necessary to make sure the connection is closed properly.
    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self._conn.close()


def main(argv=None):
    parser = argparse.ArgumentParser(description="Lists and retires runs recorded in an output directory.")
    parser.add_argument("--debug", action="store_true")

    run_id_parent_parser = argparse.ArgumentParser(add_help=False)
    run_id_parent_parser.add_argument("run_id")

    out_parent_parser = argparse.ArgumentParser(add_help=False)
    out_parent_parser.add_argument("--out", dest="out_dir", default="runs",
                                   help="Output directory holding vipamin.db. Default is ./runs.")

    subparsers = parser.add_subparsers(dest="command")
    subparsers.required = True
    subparsers.add_parser("list", help="Lists run records.", parents=[out_parent_parser])
    subparsers.add_parser("delete", help="Marks a run as inactive so that its run id can be reused.",
                          parents=[run_id_parent_parser, out_parent_parser])
    subparsers.add_parser("delete-all", help="Marks all runs as inactive.", parents=[out_parent_parser])

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO)

    if not os.path.exists(args.out_dir):
        print("%s does not exist" % args.out_dir, file=sys.stderr)
        return 4
    with RunStore(args.out_dir) as store:
        if args.command == "delete":
            print("Deleting %s" % args.run_id)
            del store[args.run_id]
        elif args.command == "delete-all":
            print("Deleting all")
            store.delete_all()
        elif args.command == "list":
            for run_id, command, status, path, active, created, last_update in store:
                print("%s [command=%s; status=%s; active=%s; created=%s; last_update=%s; path=%s]" % (
                    run_id, command, status, "true" if active else "false", created, last_update, path))
    return 0


if __name__ == "__main__":
    sys.exit(main())
