#! /usr/bin/python3
# coding: utf-8

import logging
logger = logging.getLogger(__name__)
import threading
import time
from typing import Any, Callable, Dict, List

import numpy as np

from emcel_const import State

state = State


class StudyManager:
    """ The scheduler for studies.

    Each study (one time step of a rate study, one chunk of paths, ...)
    runs in its own :class:`StudyTask` thread; at most `workers` of them
    compute at the same time. Results are gathered in creation order,
    so the outcome never depends on the number of workers.

    :param workers: the maximal number of concurrently running studies
    """

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise ValueError("workers must be at least 1")
        self.workers = workers
        self.slots = threading.BoundedSemaphore(workers)

        # dictionary with study ids and task objects, in creation order
        self.studies = {}

    def newStudy(self, id_study: str, target: Callable, *args, **kwargs):
        """  Create and start a new study.

        :return: the created task

        :param id_study: a unique identifier of the study
        :param target: the function computing the study result
        """
        if id_study in self.studies:
            raise ValueError("study %s already exists" % id_study)
        new_task = StudyTask(self, id_study, target, args, kwargs)
        logger.debug("%s study created" % id_study)
        self.studies[id_study] = new_task
        new_task.start()
        # start() launches the run() method of task as a Thread
        return new_task

    def join(self) -> List[Any]:
        """ Wait for all studies and return their results in creation order.

        :return: the list of results

        The first error raised by a study is raised again here once all
        threads have ended.
        """
        for task in self.studies.values():
            task.join()
        for task in self.studies.values():
            if task.state == state.ERROR:
                raise task.error
        return self.results()

    def results(self) -> List[Any]:
        """ The results of the studies, in creation order.

        Studies not completed yet give None.
        """
        return [task.result for task in self.studies.values()]

    def getStudy(self, id_study: str) -> Dict:
        """ The getter for a single study description.
        """
        if id_study in self.studies.keys():
            return {"study": str(self.studies[id_study])}
        else:
            return {}

    def getAllStudies(self) -> Dict[str, Dict]:
        """ The getter for the list of all studies.

        :return: a dictionnary indexed by study ids giving the state and \
                 duration for each study
        """
        ret = {}
        for j in self.studies:
            d = {}
            task = self.studies[j]
            d['state'] = task.state
            if task.state == state.COMPLETED:
                d['duration'] = task.duration
            ret[j] = d
        return ret

    def getStats(self) -> Dict[str, float]:
        """ Some statistics about all studies completed.
        """
        counter = len(self.studies)
        list_duration = [task.duration for task in self.studies.values()
                         if task.state == state.COMPLETED]
        if not list_duration:
            percent = 0.0
            aver = 0.0
        else:
            percent = float(np.percentile(np.array(list_duration), 95))
            aver = float(np.average(np.array(list_duration)))
        ret = {}
        ret["completed ratio"] = (float(len(list_duration) / counter)
                                  if counter else 0.0)
        ret["duration 95th percentile"] = percent
        ret["average"] = aver
        return ret


class StudyTask(threading.Thread):
    """ The thread computing one study.

    :param manager: the calling study manager
    :param id_study: the id of the study
    :param target: the function to run
    :param args: positional arguments of target
    :param kwargs: keyword arguments of target
    """

    def __init__(self, manager: StudyManager, id_study: str,
                 target: Callable, args: tuple, kwargs: dict):
        super(StudyTask, self).__init__()
        self.daemon = True
        # Enables to cleanly kill the calling program with Ctrl + C

        self.manager = manager
        self.id_study = id_study
        self.target = target
        self.args = args
        self.kwargs = kwargs

        self.creation_time = time.time()
        self.duration = 0.0
        self.state = state.WAITING
        self.result = None
        self.error = None

    def __str__(self):
        return "study %s (%s)" % (self.id_study, self.state)

    def run(self):
        """ Run the study once a worker slot is free.

        This method is automatically called by the :func:`start()` \
        method inherited from :class:`Thread`.
        """
        with self.manager.slots:
            self.state = state.STARTED
            start_time = time.time()
            try:
                self.result = self.target(*self.args, **self.kwargs)
                self.state = state.COMPLETED
            except Exception as e:
                logger.warning("%s ERROR: %s" % (self.id_study, e))
                self.error = e
                self.state = state.ERROR
            self.duration = time.time() - start_time
        logger.debug("%s finished in %.3f s" % (self.id_study, self.duration))
