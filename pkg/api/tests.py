from django.test import TestCase
from django.urls import reverse
from rest_framework import status
from rest_framework.test import APIClient


def scalar_plant(**overrides):
    document = {
        "n": 1, "m": 1, "p": 1,
        "A": [[0.5]], "B": [[1.0]], "C": [[1.0]], "Q": [[1.0]], "R": [[1.0]],
    }
    document.update(overrides)
    return document


class ApiStatusTests(TestCase):
    def setUp(self):
        self.client = APIClient()

    def test_status(self):
        response = self.client.get(reverse('api_status'))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.data['message'], "Status, OK")
        self.assertIn('uptime', response.data)

    def test_root_lists_services(self):
        response = self.client.get(reverse('root_view'))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertIn('watermark_design', response.data['services'])
        self.assertIn('experiments', response.data['services'])


class DesignEndpointTests(TestCase):
    def setUp(self):
        self.client = APIClient()
        self.url = reverse('design')

    def test_scalar_design(self):
        response = self.client.post(self.url, scalar_plant(delta=1.0), format='json')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertAlmostEqual(response.data['U_star'][0][0], 3.0 / 7.0, places=10)
        self.assertAlmostEqual(response.data['J0'], 7.0 / 3.0, places=10)
        self.assertAlmostEqual(response.data['delta_J'], 1.0, places=8)

    def test_default_budget_is_fraction_of_cost(self):
        response = self.client.post(self.url, scalar_plant(), format='json')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertAlmostEqual(response.data['delta_J'], 0.1 * response.data['J0'], places=8)

    def test_custom_weight_matrix(self):
        response = self.client.post(self.url, scalar_plant(delta=1.0, X=[[1.0, 0.0], [0.0, 2.0]]), format='json')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertAlmostEqual(response.data['X'][0][0], 4.0 / 3.0 + 2.0, places=10)

    def test_wrong_shape_names_the_matrix(self):
        response = self.client.post(self.url, scalar_plant(B=[[1.0, 0.0]]), format='json')
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)
        self.assertEqual(response.data['status_code'], status.HTTP_400_BAD_REQUEST)
        self.assertTrue(response.data['message'].startswith("B:"))

    def test_unstable_plant(self):
        response = self.client.post(self.url, scalar_plant(A=[[1.5]]), format='json')
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)
        self.assertIn("stable", response.data['message'])

    def test_both_budgets(self):
        response = self.client.post(self.url, scalar_plant(delta=1.0, delta_frac=0.1), format='json')
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)
        self.assertIn("either delta or delta_frac", response.data['message'])

    def test_missing_matrix(self):
        document = scalar_plant()
        del document['R']
        response = self.client.post(self.url, document, format='json')
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)
        self.assertTrue(response.data['message'].startswith("R:"))
