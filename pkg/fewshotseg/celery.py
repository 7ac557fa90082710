"""
❓ WHY THIS FILE EXISTS:
Celery configuration for fold experiments. Settings come from Django
(CELERY_ namespace) and tasks are discovered in every installed app.
With CELERY_TASK_ALWAYS_EAGER (the default) tasks run in-process.
"""
import os
from celery import Celery

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'fewshotseg.settings')

app = Celery('fewshotseg')
# ⚙️ HOW: Tell Celery where settings are
app.config_from_object('django.conf:settings', namespace='CELERY')

# 🔍 Looks for tasks.py in every installed app (experiments.tasks)
app.autodiscover_tasks()
