"""Prompt templates sent to an external planner.

The perception and merge-planning templates are reproduced word for word
(they are part of the planner interface); the intersection template is ours,
written in the same style, because the merge rules do not cover crossings.
"""

from __future__ import annotations

PERCEPTION_TEMPLATE = """\
You are an AI assistant that helps with safe driving from a high-level perspective.
You are working with a scenario in which there are some autonomous cars and many regular cars.
You must refer to them by their IDs, which are used to label them.
You are provided with two images:
- a birds-eye view of an intersection with some autonomous cars and some regular cars;
- the front view of Vehicle {ego_cav_id}, called the Ego CAV.
In the birds-eye view, the autonomous cars are colored pink and the regular cars are colored yellow.
You must refer to them by their IDs, which are used to label them.
Directions on this map are given as you see them: North is up, South is down, East is right, West is left.
The vehicle of interest in this scenario is Vehicle {ego_cav_id}, called the Ego CAV. It currently {ego_intention}. It is currently facing north.
Your task is to discern which vehicles might interfere with the motion of the Ego CAV such that it should know about them in order to make a safe decision.
At the end of your response, you must include a space-separated list of the vehicle IDs of interest in this EXACT format:
id_1 id_2, ... id_n.
Or, only if there are no vehicle IDs of interest, include at the end of your response the number: 0."""

MERGE_PLANNING_TEMPLATE = """\
Here is the situational description from the perspective of the Ego CAV: {ego_description}
If 0 descriptions of other cars are provided, don't merge. MERGE DECISION RULES:
1. Merge only if the right lane is open.
2. Do not merge if a vehicle approaches in the right lane.
3. Merge safely if a vehicle in the right lane is behind the ego vehicle and its distance > 10.
4. Do not merge if any vehicle in the right lane is closer than 10 units.
5. Account for vehicle speed: faster vehicles require more clearance.
Do not be overly safe. If you see clearance over 10 distance you have clearance to merge.
Analyze the relative positions, distances, and speeds of vehicles.
Respond strictly in this format:
action: [merge|no merge]
reason: [brief explanation of decision based on vehicle positions and distances]"""

INTERSECTION_PLANNING_TEMPLATE = """\
Here is the situational description from the perspective of the Ego CAV: {ego_description}
The Ego CAV is approaching an intersection and intends to {maneuver}.
INTERSECTION DECISION RULES:
1. If 0 descriptions of other cars are provided, {go}.
2. {hold_cap} if a vehicle is approaching the Ego CAV's path and would reach it within 4 seconds.
3. Ignore vehicles that are behind the Ego CAV or moving away from it.
4. Otherwise, {go}.
Analyze the relative positions, distances, and speeds of vehicles.
Respond strictly in this format:
action: [{go}|{hold}]
reason: [brief explanation of decision based on vehicle positions and distances]"""

INTENTION_PHRASES = {
    "merge": "wants to merge into the lane on its right",
    "turn": "wants to turn at the intersection ahead",
    "proceed": "wants to drive straight through the intersection ahead",
    "stop-context": "is waiting at the intersection and wants to continue",
}

# (maneuver, progressive action, conservative action) per non-merge intention
_INTERSECTION_WORDING = {
    "turn": ("turn at the intersection", "proceed", "yield"),
    "proceed": ("drive straight through the intersection", "proceed", "stop"),
    "stop-context": ("continue through the intersection", "proceed", "stop"),
}


def build_perception_prompt(ego_id: int, intention: str) -> str:
    phrase = INTENTION_PHRASES.get(intention, intention)
    return PERCEPTION_TEMPLATE.format(ego_cav_id=ego_id, ego_intention=phrase)


def build_planning_prompt(ego_description: str, intention: str = "merge") -> str:
    if intention == "merge":
        return MERGE_PLANNING_TEMPLATE.format(ego_description=ego_description)
    maneuver, go, hold = _INTERSECTION_WORDING[intention]
    return INTERSECTION_PLANNING_TEMPLATE.format(
        ego_description=ego_description, maneuver=maneuver, go=go, hold=hold, hold_cap=hold.capitalize())


def parse_relevant_ids(text: str) -> list[int]:
    """Vehicle ids listed at the end of a perception response; ``[]`` for the '0' answer."""
    tail = text.strip().splitlines()[-1] if text.strip() else ""
    if ":" in tail:
        tail = tail.rsplit(":", 1)[1]
    tokens = [t.strip(" .") for t in tail.replace(",", " ").split()]
    ids = [int(t) for t in tokens if t.isdigit()]
    return [] if ids == [0] else ids
